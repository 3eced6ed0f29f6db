#include <doctest.h>

#include <random>

#include "nrgs/objectives.hpp"
#include "test_helpers.hpp"

using namespace nrgs;

namespace {

MaskImage ones(int w, int h) { return MaskImage(w, h, true); }

}  // namespace

TEST_CASE("photometric l2 pinned example") {
  // 2x1 image, one masked-in pixel with error (0.1, 0, 0): loss = 0.01 / 2
  Image rend(2, 1, 3), obs(2, 1, 3);
  rend.at(0, 0, 0) = 0.6;
  obs.at(0, 0, 0) = 0.5;
  MaskImage valid = ones(2, 1), covis = ones(2, 1);
  covis.set(1, 0, false);
  Image grad;
  const double l = photometricL2(rend, obs, valid, covis, nullptr, &grad);
  CHECK(l == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(grad.at(0, 0, 0) == doctest::Approx(2.0 * 0.1 / 2.0).epsilon(1e-12));
  CHECK(grad.at(1, 0, 0) == 0.0);

  SUBCASE("identical images give zero") {
    CHECK(photometricL2(obs, obs, valid, covis, nullptr, nullptr) == 0.0);
  }
  SUBCASE("all-zero masks give zero loss and gradients") {
    MaskImage none(2, 1, false);
    Image g2;
    CHECK(photometricL2(rend, obs, none, covis, nullptr, &g2) == 0.0);
    for (size_t i = 0; i < g2.size(); ++i) CHECK(g2.data()[i] == 0.0);
  }
}

TEST_CASE("photometric l2 gradient matches finite differences") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  Image rend(6, 5, 3), obs(6, 5, 3), weight(6, 5, 1);
  for (size_t i = 0; i < rend.size(); ++i) {
    rend.data()[i] = u(rng);
    obs.data()[i] = u(rng);
  }
  for (size_t i = 0; i < weight.size(); ++i) weight.data()[i] = u(rng);
  MaskImage valid = ones(6, 5), covis = ones(6, 5);
  covis.set(2, 2, false);
  Image grad;
  photometricL2(rend, obs, valid, covis, &weight, &grad);
  const double h = 1e-6;
  for (int i = 0; i < 20; ++i) {
    const size_t idx = (i * 7) % rend.size();
    const double v0 = rend.data()[idx];
    rend.data()[idx] = v0 + h;
    const double lp = photometricL2(rend, obs, valid, covis, &weight, nullptr);
    rend.data()[idx] = v0 - h;
    const double lm = photometricL2(rend, obs, valid, covis, &weight, nullptr);
    rend.data()[idx] = v0;
    CHECK(grad.data()[idx] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4));
  }
}

TEST_CASE("ssim mix pinned cases") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  Image a(20, 15, 3);
  for (size_t i = 0; i < a.size(); ++i) a.data()[i] = u(rng);

  SUBCASE("identical images give zero loss") {
    CHECK(photometricSsimMix(a, a, 0.2) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ssimMean(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("lambda = 1 is pure mean absolute error") {
    Image b = a;
    for (size_t i = 0; i < b.size(); ++i) b.data()[i] += 0.1;
    CHECK(photometricSsimMix(b, a, 1.0) == doctest::Approx(0.1).epsilon(1e-9));
  }
}

TEST_CASE("ssim mix gradient matches finite differences") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.2, 0.8);
  Image rend(14, 12, 3), obs(14, 12, 3);
  for (size_t i = 0; i < rend.size(); ++i) {
    rend.data()[i] = u(rng);
    obs.data()[i] = u(rng);
  }
  Image grad;
  photometricSsimMix(rend, obs, 0.2, &grad);
  const double h = 1e-5;
  double maxRel = 0;
  for (int i = 0; i < 30; ++i) {
    const size_t idx = (i * 13 + 5) % rend.size();
    const double v0 = rend.data()[idx];
    rend.data()[idx] = v0 + h;
    const double lp = photometricSsimMix(rend, obs, 0.2);
    rend.data()[idx] = v0 - h;
    const double lm = photometricSsimMix(rend, obs, 0.2);
    rend.data()[idx] = v0;
    const double fd = (lp - lm) / (2 * h);
    maxRel = std::max(maxRel, std::abs(fd - grad.data()[idx]) / std::max(std::abs(fd), 1e-9));
  }
  CHECK(maxRel < 1e-3);
}

TEST_CASE("annealing schedule closed form") {
  AnnealSchedule s{1.0, 0.01, 10.0};
  CHECK(annealWeight(0, s) == doctest::Approx(1.01).epsilon(1e-12));
  CHECK(annealWeight(10, s) == doctest::Approx(std::exp(-1.0) + 0.01).epsilon(1e-12));
  CHECK(annealWeight(500, s) == doctest::Approx(0.01).epsilon(1e-9));
  // monotone non-increasing, bounded below
  double prev = annealWeight(0, s);
  for (int k = 1; k < 100; ++k) {
    const double v = annealWeight(k, s);
    CHECK(v <= prev + 1e-15);
    CHECK(v >= s.lambdaMin);
    prev = v;
  }
}

TEST_CASE("irls weights follow the huber derivative") {
  const double eps = 1e-6, delta = 5.0;
  CHECK(irlsWeight(0.0, delta, eps) == 0.0);
  CHECK(irlsWeight(2.0, delta, eps) == doctest::Approx(2.0 / (2.0 + eps)).epsilon(1e-6));
  CHECK(irlsWeight(50.0, delta, eps) == doctest::Approx(delta / (50.0 + eps)).epsilon(1e-9));
  // non-increasing beyond the threshold
  double prev = irlsWeight(delta, delta, eps);
  for (double r = delta; r < 20 * delta; r += delta / 3) {
    const double g = irlsWeight(r, delta, eps);
    CHECK(g <= prev + 1e-15);
    prev = g;
  }
}

TEST_CASE("depth term hand example") {
  // one pixel, r = 2mm, quadratic huber zone: loss = 1/2 * (2/(2+eps)) * 4
  Image rend(1, 1, 1), prior(1, 1, 1);
  rend.at(0, 0) = 12.0;
  prior.at(0, 0) = 10.0;
  MaskImage m = ones(1, 1);
  const Image rf = depthResidualField(rend, prior, m);
  CHECK(rf.at(0, 0) == doctest::Approx(2.0));
  const double eps = 1e-6;
  const auto res = depthTerm(rend, prior, m, nullptr, rf, 5.0, eps, 1.0, true);
  const double gamma = 2.0 / (2.0 + eps);
  CHECK(res.loss == doctest::Approx(0.5 * gamma * 4.0).epsilon(1e-9));
  CHECK(res.grad.at(0, 0) == doctest::Approx(gamma * 2.0).epsilon(1e-9));
}

TEST_CASE("depth term ignores invalid prior pixels") {
  Image rend(2, 1, 1), prior(2, 1, 1);
  rend.at(0, 0) = 5;
  prior.at(0, 0) = 0;  // invalid
  rend.at(1, 0) = 5;
  prior.at(1, 0) = 5;
  MaskImage m = ones(2, 1);
  const Image rf = depthResidualField(rend, prior, m);
  const auto res = depthTerm(rend, prior, m, nullptr, rf, 1.0, 1e-6, 1.0, false);
  CHECK(res.loss == 0.0);
}

TEST_CASE("bce pinned values and logit gradient") {
  CHECK(bceLoss(0.5, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bceLoss(0.6, 1.0) == doctest::Approx(-std::log(0.6)).epsilon(1e-6));
  CHECK(bceGradLogit(0.7, 0.7) == doctest::Approx(0.0));
  // gradient of BCE w.r.t. logit via finite differences
  const double wStar = 0.3, s0 = 0.4;
  const double h = 1e-6;
  const double fd = (bceLoss(sigmoid(s0 + h), wStar) - bceLoss(sigmoid(s0 - h), wStar)) / (2 * h);
  CHECK(bceGradLogit(sigmoid(s0), wStar) == doctest::Approx(fd).epsilon(1e-6));
}

TEST_CASE("smoothness regularizers vanish on uniform and static fields") {
  auto map = nrgs::testutil::randomMap(12, 1, 9);
  buildNeighborGraph(map, 4);
  for (auto& g : map.primitives) g.defLogit = 0.3;
  CHECK(wdSpatialLoss(map, 1.0, nullptr) == doctest::Approx(0.0).epsilon(1e-15));
  std::vector<double> prev(map.size());
  for (size_t i = 0; i < map.size(); ++i) prev[i] = map.primitives[i].deformationProbability();
  CHECK(wdTemporalLoss(map, prev, 1.0, nullptr) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("residual regularizer magnitude and temporal terms") {
  ResidualSet d, dPrev;
  VecX v = VecX::Zero(3);
  v << 1, 2, 3;
  d.prims[0].attr[0].emplace_back(1, v);
  dPrev.prims[0].attr[0].emplace_back(1, v);
  // d == dPrev: temporal term zero, magnitude term lambdaReg * |v|^2
  const double loss = residualRegularizer(d, &dPrev, 0.01, 0.5, nullptr);
  CHECK(loss == doctest::Approx(0.01 * 14.0).epsilon(1e-12));
}

TEST_CASE("track terms match a hand-computed single point") {
  // one primitive, one track, blend weight 1, everything in the huber
  // quadratic zone with gamma = 1
  std::vector<DeformedGaussian> prims(1);
  prims[0].disp = Vec3(1, 0, 0);
  std::vector<TrackPoint> pts(1);
  pts[0].x0 = Vec3(0, 0, 50);
  pts[0].xt = Vec3(0.5, 0, 50);  // observed displacement (0.5, 0, 0)
  pts[0].blend = {{0, 1.0}};
  const auto K = nrgs::testutil::smallCamera(17, 17, 30.0);
  pts[0].u0 = Vec2(K.cx, K.cy);
  const Vec3 predictedXt = pts[0].x0 + prims[0].disp;
  pts[0].ut = Vec2(K.fx * predictedXt.x() / predictedXt.z() + K.cx, K.cy);  // 2d residual = 0

  const auto pred = predictedDisplacements(pts, prims);
  CHECK((pred[0] - Vec3(1, 0, 0)).norm() < 1e-15);

  std::vector<double> r2, r3;
  trackResiduals(pts, pred, K, Pose::identity(), r2, r3);
  CHECK(r3[0] == doctest::Approx(0.5));
  CHECK(r2[0] == doctest::Approx(0.0).epsilon(1e-12));

  const auto res = trackTerms(pts, pred, prims, K, Pose::identity(), {1.0}, {1.0}, 1.0, 1.0, true);
  CHECK(res.loss3d == doctest::Approx(0.5 * 0.25).epsilon(1e-12));
  CHECK(res.loss2d == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((res.dispGrad[0] - Vec3(0.5, 0, 0)).norm() < 1e-12);
}

TEST_CASE("track term gradients match finite differences") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1, 1);
  const auto K = nrgs::testutil::smallCamera(32, 32, 40.0);
  std::vector<DeformedGaussian> prims(4);
  for (auto& p : prims) p.disp = Vec3(u(rng), u(rng), u(rng));
  std::vector<TrackPoint> pts(6);
  const Pose seedPose(Quat(1, 0.05, -0.03, 0.08).normalized(), Vec3(2, -1, 4));
  for (auto& p : pts) {
    p.x0 = Vec3(u(rng) * 10, u(rng) * 10, 60 + u(rng) * 10);
    p.xt = p.x0 + Vec3(u(rng), u(rng), u(rng));
    p.ut = Vec2(K.cx + u(rng) * 10, K.cy + u(rng) * 10);
    p.seedCamToWorld = seedPose;
    p.blend = {{0, 0.4}, {1, 0.3}, {2, 0.2}, {3, 0.05}};
    p.pixelWeight = 0.5 + 0.5 * u(rng) * u(rng);
  }
  Pose cam(Quat(1, 0.01, 0.02, -0.01).normalized(), Vec3(0.2, -0.1, 0.3));

  auto lossOf = [&](const Pose& c) {
    const auto pred = predictedDisplacements(pts, prims);
    std::vector<double> g2(pts.size(), 1.0), g3(pts.size(), 1.0);
    const auto r = trackTerms(pts, pred, prims, K, c, g2, g3, 0.7, 1.3, false);
    return r.loss2d + r.loss3d;
  };

  const auto pred = predictedDisplacements(pts, prims);
  std::vector<double> g2(pts.size(), 1.0), g3(pts.size(), 1.0);
  const auto res = trackTerms(pts, pred, prims, K, cam, g2, g3, 0.7, 1.3, true);

  const double h = 1e-6;
  // displacement gradients
  for (int pi = 0; pi < 4; ++pi)
    for (int d = 0; d < 3; ++d) {
      const double v0 = prims[pi].disp[d];
      prims[pi].disp[d] = v0 + h;
      const double lp = lossOf(cam);
      prims[pi].disp[d] = v0 - h;
      const double lm = lossOf(cam);
      prims[pi].disp[d] = v0;
      CHECK(res.dispGrad[pi][d] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4));
    }
  // pose twist gradients
  for (int k = 0; k < 6; ++k) {
    Twist xi;
    if (k < 3)
      xi.rot[k] = h;
    else
      xi.trans[k - 3] = h;
    const double lp = lossOf(se3Exp(xi) * cam);
    if (k < 3)
      xi.rot[k] = -h;
    else
      xi.trans[k - 3] = -h;
    const double lm = lossOf(se3Exp(xi) * cam);
    const double fd = (lp - lm) / (2 * h);
    const double analytic = k < 3 ? res.poseGrad.rot[k] : res.poseGrad.trans[k - 3];
    CHECK(analytic == doctest::Approx(fd).epsilon(1e-4));
  }
}
