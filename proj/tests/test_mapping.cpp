#include <doctest.h>

#include <random>

#include "nrgs/mapping.hpp"
#include "test_helpers.hpp"

using namespace nrgs;

TEST_CASE("posterior responsibility pinned values and dual-form equivalence") {
  CHECK(posteriorResponsibility(1.0, 1.0, 0.5, 0.5, 200.0) == doctest::Approx(0.5));
  CHECK(posteriorResponsibility(0.01, 0.0, 0.5, 0.5, 200.0) == doctest::Approx(sigmoid(2.0)).epsilon(1e-12));
  CHECK(sigmoid(2.0) == doctest::Approx(0.880797).epsilon(1e-5));

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double eR = 0.05 * u(rng), eD = 0.05 * u(rng);
    const double piD = 0.05 + 0.9 * u(rng), piR = 1.0 - piD;
    const double beta = 200.0;
    const double sigForm = posteriorResponsibility(eR, eD, piD, piR, beta);
    // direct Bayes quotient
    const double num = piD * std::exp(-beta * eD);
    const double den = num + piR * std::exp(-beta * eR);
    worst = std::max(worst, std::abs(sigForm - num / den));
  }
  CHECK(worst < 1e-12);

  CHECK_THROWS_AS(posteriorResponsibility(0, 0, 0.7, 0.7, 200), std::invalid_argument);
}

TEST_CASE("aggregated responsibility weights evidence by visibility and recency") {
  RunConfig cfg;
  HypothesisStats st;
  st.eR = Eigen::MatrixXd::Zero(2, 2);
  st.eD = Eigen::MatrixXd::Zero(2, 2);
  st.vis = Eigen::MatrixXd::Zero(2, 2);

  SUBCASE("single keyframe at the current time with unit visibility") {
    st.eR(0, 1) = 0.02;
    st.vis(0, 1) = 1.0;
    const auto w = aggregateResponsibility(st, {0.4, 0.5}, 0.5, cfg);
    const double L = cfg.beta * 0.02;
    CHECK(w[0] == doctest::Approx(sigmoid(L / (1.0 + cfg.aggEps))).epsilon(1e-12));
  }
  SUBCASE("invisible primitives stay uninformative") {
    const auto w = aggregateResponsibility(st, {0.4, 0.5}, 0.5, cfg);
    CHECK(w[1] == doctest::Approx(0.5));
  }
  SUBCASE("two keyframes match the scripted weighted average") {
    st.eR(0, 0) = 0.03;
    st.eD(0, 0) = 0.01;
    st.eR(0, 1) = 0.00;
    st.eD(0, 1) = 0.02;
    st.vis(0, 0) = 0.8;
    st.vis(0, 1) = 0.6;
    const double t = 0.5;
    const std::vector<double> times = {0.4, 0.48};
    const auto w = aggregateResponsibility(st, times, t, cfg);
    const double g0 = std::exp(-cfg.etaDecay * (t - times[0])) * 0.8;
    const double g1 = std::exp(-cfg.etaDecay * (t - times[1])) * 0.6;
    const double L0 = cfg.beta * (0.03 - 0.01), L1 = cfg.beta * (0.00 - 0.02);
    const double expect = sigmoid((g0 * L0 + g1 * L1) / (g0 + g1 + cfg.aggEps));
    CHECK(w[0] == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("uniform scaling of the weights is absorbed up to eps") {
    st.eR(0, 0) = 0.03;
    st.vis(0, 0) = 0.5;
    st.vis(0, 1) = 0.25;
    st.eR(0, 1) = 0.01;
    RunConfig noEps = cfg;
    noEps.aggEps = 1e-300;  // eps-free variant: exact invariance
    const auto w1 = aggregateResponsibility(st, {0.5, 0.5}, 0.5, noEps);
    st.vis *= 7.0;
    const auto w2 = aggregateResponsibility(st, {0.5, 0.5}, 0.5, noEps);
    CHECK(w1[0] == doctest::Approx(w2[0]).epsilon(1e-12));
  }
}

namespace {

// two primitives on a 2x2 image: front splat covers the left column, back
// splat covers everything
KeyframeWindow tinyWindow(CanonicalMap& map, Intrinsics& K) {
  K.fx = K.fy = 2.0;
  K.cx = 0.5;
  K.cy = 0.5;
  K.width = 2;
  K.height = 2;

  map.primitives.clear();
  map.bases.clear();
  GaussianPrimitive a;
  a.mean = Vec3(-5, 0, 40);
  a.logScale = Vec3::Constant(std::log(6.0));
  a.rot = Quat::Identity();
  a.opacityLogit = logit(0.6);
  a.rgb = Vec3(0.9, 0.1, 0.1);
  a.defLogit = logit(0.7);
  GaussianPrimitive b;
  b.mean = Vec3(0, 0, 60);
  b.logScale = Vec3::Constant(std::log(40.0));
  b.rot = Quat::Identity();
  b.opacityLogit = logit(0.95);
  b.rgb = Vec3(0.1, 0.2, 0.8);
  b.defLogit = logit(0.3);
  map.primitives = {a, b};
  map.bases.resize(2);
  for (int i = 0; i < 2; ++i)
    for (Attr at : kAllAttrs) {
      TemporalBasis tb;
      tb.id = map.allocateBasisId();
      tb.center = 0.5;
      tb.extent = 0.3;
      tb.weight = VecX::Zero(attrDim(at));
      map.bases[i][at].push_back(tb);
    }

  KeyframeWindow w;
  Keyframe kf;
  kf.frame = 0;
  kf.time = 0.5;
  kf.camFromWorld = Pose();
  kf.K = K;
  DeformOptions d;
  kf.image = render(deformMap(map, d).gaussians, K, Pose()).rgb;
  kf.valid = MaskImage(2, 2, true);
  kf.covis = MaskImage(2, 2, true);
  kf.priorDepth = Image(2, 2, 1, 50.0);
  w.entries.push_back(std::move(kf));
  return w;
}

}  // namespace

TEST_CASE("dual hypothesis stats: zero field, invisibility, and a direct summation oracle") {
  CanonicalMap map;
  Intrinsics K;
  KeyframeWindow window = tinyWindow(map, K);
  ResidualStore store;
  RunConfig cfg;
  cfg.threads = 1;

  SUBCASE("zero deformation field gives equal energies") {
    const auto renders = computeWindowRenders(window, map, store, cfg);
    const auto st = dualHypothesisStats(window, map, store, renders, cfg);
    for (int i = 0; i < 2; ++i) CHECK(st.eR(i, 0) == doctest::Approx(st.eD(i, 0)).epsilon(1e-12));
  }

  SUBCASE("an invisible primitive accumulates nothing") {
    map.primitives[0].mean = Vec3(0, 0, -50);  // behind the camera
    const auto renders = computeWindowRenders(window, map, store, cfg);
    const auto st = dualHypothesisStats(window, map, store, renders, cfg);
    CHECK(st.eR(0, 0) == 0.0);
    CHECK(st.eD(0, 0) == 0.0);
    CHECK(st.vis(0, 0) == 0.0);
  }

  SUBCASE("hand-built deformation matches a scripted accumulation") {
    // give primitive 0 a mean offset so the hypotheses genuinely differ
    map.bases[0][Attr::Mean][0].weight << 2.0, 0, 0;
    const auto renders = computeWindowRenders(window, map, store, cfg);
    const auto st = dualHypothesisStats(window, map, store, renders, cfg);

    DeformOptions rigid;
    rigid.t = 0.5;
    rigid.gate = GateMode::ForceRigid;
    DeformOptions deformable = rigid;
    deformable.gate = GateMode::ForceDeformable;
    const auto outR = render(deformMap(map, rigid).gaussians, K, Pose());
    const auto outD = render(deformMap(map, deformable).gaussians, K, Pose());
    const auto& cur = renders.current[0];
    const Keyframe& kf = window.entries[0];

    Eigen::Matrix2d expectR = Eigen::Matrix2d::Zero();  // (prim, 0) energies
    Eigen::Vector2d expectVis = Eigen::Vector2d::Zero();
    Eigen::Matrix2d expectD = Eigen::Matrix2d::Zero();
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        double lR = 0, lD = 0;
        for (int c = 0; c < 3; ++c) {
          lR += std::abs(outR.rgb.at(x, y, c) - kf.image.at(x, y, c));
          lD += std::abs(outD.rgb.at(x, y, c) - kf.image.at(x, y, c));
        }
        for (int e = 0; e < cur.contribCount(x, y); ++e) {
          const auto& en = cur.contribBegin(x, y)[e];
          expectR(en.prim, 0) += en.blend * lR;
          expectD(en.prim, 0) += en.blend * lD;
          expectVis(en.prim) += en.blend;
        }
      }
    for (int i = 0; i < 2; ++i) {
      CHECK(st.eR(i, 0) == doctest::Approx(expectR(i, 0)).epsilon(1e-12));
      CHECK(st.eD(i, 0) == doctest::Approx(expectD(i, 0)).epsilon(1e-12));
      CHECK(st.vis(i, 0) == doctest::Approx(expectVis(i)).epsilon(1e-12));
    }
    CHECK(st.eR(0, 0) != st.eD(0, 0));
  }
}

TEST_CASE("window pose optimization leaves the map bit-identical and reduces pose error") {
  auto map = testutil::randomMap(60, 1, 21, 0.1, 0.3);
  for (auto& bs : map.bases)
    for (auto& attr : bs.attr)
      for (auto& b : attr) b.weight.setZero();
  const Intrinsics K = testutil::smallCamera(48, 40, 50.0);

  RunConfig cfg;
  cfg.threads = 1;
  cfg.windowPoseIters = 30;

  // two keyframes rendered from ground-truth poses
  const Pose gt0;  // gauge anchor
  const Pose gt1(Quat(1, 0.01, 0.02, -0.01).normalized(), Vec3(1.5, -1, 0.5));
  KeyframeWindow window;
  ResidualStore store;
  for (int i = 0; i < 2; ++i) {
    Keyframe kf;
    kf.frame = i;
    kf.time = 0.4 + 0.1 * i;
    kf.camFromWorld = i == 0 ? gt0 : gt1;
    kf.K = K;
    DeformOptions d;
    d.t = kf.time;
    const auto out = render(deformMap(map, d).gaussians, K, kf.camFromWorld);
    kf.image = out.rgb;
    kf.priorDepth = out.depth;
    kf.valid = MaskImage(K.width, K.height, true);
    kf.covis = MaskImage(K.width, K.height, true);
    // exact same-frame track priors, as the pipeline provides
    std::vector<Track> tracks;
    int tid = 0;
    for (int y = 3; y < K.height - 3; y += 6)
      for (int x = 3; x < K.width - 3; x += 6) {
        const double dep = out.depth.at(x, y);
        if (dep <= 0) continue;
        Track t;
        t.id = tid++;
        t.t0Frame = i;
        t.u0 = t.ut = Vec2(x, y);
        t.x0 = t.xt = Vec3((x - K.cx) / K.fx * dep, (y - K.cy) / K.fy * dep, dep);
        tracks.push_back(t);
      }
    kf.trackPoints = buildTrackPoints(tracks, i, out, kf.camFromWorld.inverse(), kf.valid, kf.covis);
    kf.tTrack0 = kf.time;
    kf.track0Frame = i;
    window.entries.push_back(std::move(kf));
  }

  // perturb the newest pose by 0.5 mm
  Twist nudge;
  nudge.trans = Vec3(0.3, -0.3, 0.2);
  window.entries[1].camFromWorld = se3Exp(nudge) * gt1;
  const double before = se3Log(window.entries[1].camFromWorld * gt1.inverse()).norm();

  const uint64_t checksum = mapChecksum(map);
  optimizeWindowPoses(window, map, store, cfg);
  CHECK(mapChecksum(map) == checksum);

  const double after = se3Log(window.entries[1].camFromWorld * gt1.inverse()).norm();
  CHECK(after < 0.5 * before);
  // the gauge anchor never moves
  CHECK(se3Log(window.entries[0].camFromWorld * gt0.inverse()).norm() == 0.0);
}

TEST_CASE("map extension inserts only over uncovered, untracked, depth-valid pixels") {
  RunConfig cfg;
  cfg.extensionStride = 2;
  const Intrinsics K = testutil::smallCamera(16, 12, 20.0);
  const Image image(16, 12, 3, 0.5);
  Image depth(16, 12, 1, 40.0);
  for (int x = 0; x < 16; ++x) depth.at(x, 3) = 0.0;  // a depthless row

  SUBCASE("fully covered view inserts nothing") {
    CanonicalMap map;
    const Image covered(16, 12, 1, 0.0);  // transmittance 0
    const MaskImage noTracks(16, 12, false);
    const auto ins = extendMap(map, K, Pose(), covered, noTracks, depth, image, 0.5, cfg);
    CHECK(ins.empty());
  }
  SUBCASE("empty map fills the stride grid outside the track hull") {
    CanonicalMap map;
    const Image open(16, 12, 1, 1.0);
    MaskImage tracks(16, 12, false);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 8; ++x) tracks.set(x, y, true);  // left half tracked
    const auto ins = extendMap(map, K, Pose(), open, tracks, depth, image, 0.5, cfg);
    CHECK(!ins.empty());
    for (int idx : ins) {
      const Vec2 u = project(K, Pose(), map.primitives[idx].mean);
      CHECK(u.x() > 7.5);                     // outside the tracked half
      CHECK(std::abs(u.y() - 3.0) > 0.49);    // skipped the depthless row
    }
    // new primitives deform as the identity at insertion time
    DeformOptions d;
    d.t = 0.5;
    const auto ds = deformMap(map, d);
    for (int idx : ins) CHECK((ds.gaussians[idx].mean - map.primitives[idx].mean).norm() == 0.0);
  }
}

TEST_CASE("management inserts zero-weight coverage bases without changing the rendering") {
  CanonicalMap map;
  Intrinsics K;
  KeyframeWindow window = tinyWindow(map, K);
  RunConfig cfg;
  cfg.threads = 1;
  // move basis support far from the query time
  for (auto& bs : map.bases)
    for (auto& attr : bs.attr)
      for (auto& b : attr) {
        b.center = 0.0;
        b.extent = 0.05;
      }
  DeformOptions d;
  d.t = 0.9;
  const auto before = render(deformMap(map, d).gaussians, K, Pose());

  ResidualStore store;
  const auto rep = manageDeformationField(map, {0.9}, 0.9, {}, cfg, &store);
  for (int a = 0; a < kNumAttrs; ++a) CHECK(rep.attr[a].insertedCoverage == 2);  // one per primitive

  const auto after = render(deformMap(map, d).gaussians, K, Pose());
  for (size_t i = 0; i < before.rgb.size(); ++i) CHECK(before.rgb.data()[i] == after.rgb.data()[i]);
}

TEST_CASE("management merges identical bases and preserves the offset function") {
  CanonicalMap map;
  map.primitives.resize(1);
  map.bases.resize(1);
  map.primitives[0].defLogit = logit(0.8);
  for (int k = 0; k < 2; ++k) {
    TemporalBasis b;
    b.id = map.allocateBasisId();
    b.center = 0.5;
    b.extent = 0.2;
    b.weight = VecX::Zero(3);
    b.weight << (k ? 1.0 : 2.0), 0, 0;
    map.bases[0][Attr::Mean].push_back(b);
  }
  RunConfig cfg;
  const std::vector<double> times = {0.5};

  std::vector<double> offBefore;
  for (double t = 0.0; t <= 1.0; t += 0.1)
    offBefore.push_back(attributeOffset(map.bases[0], Attr::Mean, t, nullptr, 0)[0]);

  ResidualStore store;
  VecX delta = VecX::Zero(3);
  delta << 0.5, 0, 0;
  store[3].prims[0].attr[0].emplace_back(map.bases[0][Attr::Mean][0].id, delta);
  store[3].prims[0].attr[0].emplace_back(map.bases[0][Attr::Mean][1].id, delta);

  const auto rep = manageDeformationField(map, times, 0.5, {}, cfg, &store);
  CHECK(rep.attr[0].merged == 1);
  REQUIRE(map.bases[0][Attr::Mean].size() == 1);
  CHECK(map.bases[0][Attr::Mean][0].weight[0] == doctest::Approx(3.0));

  size_t offIdx = 0;
  for (double t = 0.0; t <= 1.0; t += 0.1) {
    const double off = attributeOffset(map.bases[0], Attr::Mean, t, nullptr, 0)[0];
    CHECK(off == doctest::Approx(offBefore[offIdx++]).epsilon(1e-12));
  }
  // merged residuals sum under the new id
  const VecX* merged = store[3].find(0, Attr::Mean, map.bases[0][Attr::Mean][0].id);
  REQUIRE(merged != nullptr);
  CHECK((*merged)[0] == doctest::Approx(1.0));
}

TEST_CASE("management prunes or freezes inactive bases of rigid primitives") {
  CanonicalMap map;
  map.primitives.resize(1);
  map.bases.resize(1);
  map.primitives[0].defLogit = logit(0.9);
  // a dominant active basis plus a negligible one; and an expired negligible one
  auto add = [&](double center, double extent, double w) {
    TemporalBasis b;
    b.id = map.allocateBasisId();
    b.center = center;
    b.extent = extent;
    b.weight = VecX::Zero(3);
    b.weight << w, 0, 0;
    map.bases[0][Attr::Mean].push_back(b);
  };
  add(0.5, 0.2, 10.0);    // dominant
  add(0.35, 0.45, 0.01);  // negligible, dissimilar, temporally current -> removed
  add(0.05, 0.02, 0.01);  // negligible, expired (0.05 + 0.06 < 0.5) -> frozen
  RunConfig cfg;
  const auto rep = manageDeformationField(map, {0.5}, 0.5, {}, cfg, nullptr);
  CHECK(rep.attr[0].pruned == 1);
  CHECK(rep.attr[0].frozen == 1);
  REQUIRE(map.bases[0][Attr::Mean].size() == 2);
  int frozen = 0;
  for (const auto& b : map.bases[0][Attr::Mean]) frozen += b.frozen;
  CHECK(frozen == 1);
}

TEST_CASE("global BA lowers the loss and supervises deformation probabilities") {
  CanonicalMap map;
  Intrinsics K;
  KeyframeWindow window = tinyWindow(map, K);
  // a second keyframe so the window is valid
  Keyframe kf2 = window.entries[0];
  kf2.frame = 1;
  kf2.time = 0.6;
  window.entries.push_back(kf2);

  ResidualStore store;
  RunConfig cfg;
  cfg.threads = 1;
  cfg.baIters = 20;
  cfg.baResponsibilityEvery = 5;
  cfg.managementEnabled = false;

  BaResult res = globalDeformableBA(map, window, store, cfg);
  REQUIRE(res.lossTrace.size() == 20);
  CHECK(res.lossTrace.back() < res.lossTrace.front() + 1e-9);
  CHECK(res.lastResponsibility.size() == map.size());

  KeyframeWindow tooSmall;
  tooSmall.entries.push_back(window.entries[0]);
  CHECK_THROWS_AS(globalDeformableBA(map, tooSmall, store, cfg), std::invalid_argument);
}

TEST_CASE("frozen bases stay bit-identical through a BA invocation") {
  CanonicalMap map;
  Intrinsics K;
  KeyframeWindow window = tinyWindow(map, K);
  Keyframe kf2 = window.entries[0];
  kf2.frame = 1;
  kf2.time = 0.6;
  window.entries.push_back(kf2);

  map.bases[0][Attr::Mean][0].frozen = true;
  map.bases[0][Attr::Mean][0].weight << 0.123456789, -0.5, 0.25;
  const VecX frozenCopy = map.bases[0][Attr::Mean][0].weight;
  const double center = map.bases[0][Attr::Mean][0].center;
  const double extent = map.bases[0][Attr::Mean][0].extent;

  ResidualStore store;
  RunConfig cfg;
  cfg.threads = 1;
  cfg.baIters = 10;
  cfg.baResponsibilityEvery = 5;
  cfg.managementEnabled = false;
  globalDeformableBA(map, window, store, cfg);

  const TemporalBasis* frozen = nullptr;
  for (const auto& b : map.bases[0][Attr::Mean])
    if (b.frozen) frozen = &b;
  REQUIRE(frozen != nullptr);
  CHECK(frozen->weight[0] == frozenCopy[0]);
  CHECK(frozen->weight[1] == frozenCopy[1]);
  CHECK(frozen->weight[2] == frozenCopy[2]);
  CHECK(frozen->center == center);
  CHECK(frozen->extent == extent);
}
