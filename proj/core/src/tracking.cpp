#include "nrgs/tracking.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>

#include "nrgs/adam.hpp"
#include "nrgs/random.hpp"

namespace nrgs {

namespace {

std::vector<double> realQuarticRoots(double a4, double a3, double a2, double a1, double a0) {
  std::vector<double> roots;
  if (std::abs(a4) < 1e-14 * std::max({std::abs(a3), std::abs(a2), std::abs(a1), std::abs(a0), 1.0})) {
    // cubic or lower: fall back to companion of degree 3 when possible
    if (std::abs(a3) < 1e-14) return roots;
    Mat3 comp = Mat3::Zero();
    comp(1, 0) = 1;
    comp(2, 1) = 1;
    comp(0, 2) = -a0 / a3;
    comp(1, 2) = -a1 / a3;
    comp(2, 2) = -a2 / a3;
    Eigen::EigenSolver<Mat3> es(comp);
    for (int i = 0; i < 3; ++i)
      if (std::abs(es.eigenvalues()[i].imag()) < 1e-8) roots.push_back(es.eigenvalues()[i].real());
    return roots;
  }
  Mat4 comp = Mat4::Zero();
  comp(1, 0) = 1;
  comp(2, 1) = 1;
  comp(3, 2) = 1;
  comp(0, 3) = -a0 / a4;
  comp(1, 3) = -a1 / a4;
  comp(2, 3) = -a2 / a4;
  comp(3, 3) = -a3 / a4;
  Eigen::EigenSolver<Mat4> es(comp);
  for (int i = 0; i < 4; ++i)
    if (std::abs(es.eigenvalues()[i].imag()) < 1e-8) roots.push_back(es.eigenvalues()[i].real());
  return roots;
}

/// Rigid Kabsch alignment mapping world points onto camera points.
std::optional<Pose> absoluteOrientation(const std::vector<Vec3>& world, const std::vector<Vec3>& cam) {
  const int n = static_cast<int>(world.size());
  Vec3 mw = Vec3::Zero(), mc = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    mw += world[i];
    mc += cam[i];
  }
  mw /= n;
  mc /= n;
  Mat3 H = Mat3::Zero();
  for (int i = 0; i < n; ++i) H += (cam[i] - mc) * (world[i] - mw).transpose();
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) S(2, 2) = -1;
  const Mat3 R = svd.matrixU() * S * svd.matrixV().transpose();
  if (!R.allFinite()) return std::nullopt;
  return Pose(Quat(R), mc - R * mw);
}

}  // namespace

std::vector<Pose> solveP3P(const std::array<Vec3, 3>& world, const std::array<Vec3, 3>& bearing) {
  const Vec3 f1 = bearing[0].normalized(), f2 = bearing[1].normalized(), f3 = bearing[2].normalized();
  const double a2 = (world[1] - world[2]).squaredNorm();
  const double b2 = (world[0] - world[2]).squaredNorm();
  const double c2 = (world[0] - world[1]).squaredNorm();
  if (a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12) return {};
  const double ca = f2.dot(f3), cb = f1.dot(f3), cg = f1.dot(f2);

  const double q = (a2 - c2) / b2;  // Grunert's (a^2 - c^2)/b^2
  const double A4 = (q - 1.0) * (q - 1.0) - 4.0 * (c2 / b2) * ca * ca;
  const double A3 = 4.0 * (q * (1.0 - q) * cb - (1.0 - (a2 + c2) / b2) * ca * cg + 2.0 * (c2 / b2) * ca * ca * cb);
  const double A2 = 2.0 * (q * q - 1.0 + 2.0 * q * q * cb * cb + 2.0 * ((b2 - c2) / b2) * ca * ca -
                           4.0 * ((a2 + c2) / b2) * ca * cb * cg + 2.0 * ((b2 - a2) / b2) * cg * cg);
  const double A1 = 4.0 * (-q * (1.0 + q) * cb + 2.0 * (a2 / b2) * cg * cg * cb - (1.0 - (a2 + c2) / b2) * ca * cg);
  const double A0 = (1.0 + q) * (1.0 + q) - 4.0 * (a2 / b2) * cg * cg;

  std::vector<Pose> out;
  for (double v : realQuarticRoots(A4, A3, A2, A1, A0)) {
    if (v <= 0) continue;
    const double denom = 2.0 * (cg - v * ca);
    if (std::abs(denom) < 1e-12) continue;
    const double u = ((-1.0 + q) * v * v - 2.0 * q * cb * v + 1.0 + q) / denom;
    if (u <= 0) continue;
    const double s1sq = b2 / (1.0 + v * v - 2.0 * v * cb);
    if (!(s1sq > 0)) continue;
    const double s1 = std::sqrt(s1sq);
    const double s2 = u * s1, s3 = v * s1;
    const std::vector<Vec3> cam = {s1 * f1, s2 * f2, s3 * f3};
    const std::vector<Vec3> w = {world[0], world[1], world[2]};
    if (auto pose = absoluteOrientation(w, cam)) out.push_back(*pose);
  }
  return out;
}

namespace {

Vec2 reproject(const Intrinsics& K, const Pose& camFromWorld, const Vec3& X, bool* valid) {
  const Vec3 p = camFromWorld * X;
  if (p.z() <= 1e-6) {
    *valid = false;
    return Vec2::Zero();
  }
  *valid = true;
  return Vec2(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
}

}  // namespace

Pose refinePnP(const std::vector<Correspondence3d2d>& corr, const std::vector<char>& inliers, const Intrinsics& K,
               Pose camFromWorld, int iters) {
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 g = Vec6::Zero();
    for (size_t i = 0; i < corr.size(); ++i) {
      if (!inliers.empty() && !inliers[i]) continue;
      const Vec3 p = camFromWorld * corr[i].world;
      if (p.z() <= 1e-6) continue;
      const double z = p.z(), z2 = z * z;
      const Vec2 u(K.fx * p.x() / z + K.cx, K.fy * p.y() / z + K.cy);
      const Vec2 r = u - corr[i].pixel;
      Eigen::Matrix<double, 2, 3> Jp;
      Jp << K.fx / z, 0, -K.fx * p.x() / z2, 0, K.fy / z, -K.fy * p.y() / z2;
      Eigen::Matrix<double, 2, 6> J;
      J.block<2, 3>(0, 0) = -Jp * skew(p);  // rotation part of the twist
      J.block<2, 3>(0, 3) = Jp;
      const double w = corr[i].weight / (r.norm() + 1e-6);  // IRLS toward weighted L1
      H += w * J.transpose() * J;
      g += w * J.transpose() * r;
    }
    H.diagonal().array() += 1e-9;
    const Vec6 delta = H.ldlt().solve(-g);
    if (!delta.allFinite()) break;
    camFromWorld = se3Exp(Twist::fromVector(delta)) * camFromWorld;
    if (delta.norm() < 1e-12) break;
  }
  return camFromWorld;
}

PnPResult solvePnPRansac(const std::vector<Correspondence3d2d>& corr, const Intrinsics& K, double thresholdPx,
                         int maxIters, double confidence, uint64_t seed) {
  PnPResult best;
  const int n = static_cast<int>(corr.size());
  if (n < 3) return best;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  double bestScore = -1;
  int neededIters = maxIters;
  for (int it = 0; it < maxIters && it < neededIters; ++it) {
    int i1 = pick(rng), i2 = pick(rng), i3 = pick(rng);
    if (i1 == i2 || i2 == i3 || i1 == i3) continue;
    const std::array<Vec3, 3> world = {corr[i1].world, corr[i2].world, corr[i3].world};
    if ((world[1] - world[0]).cross(world[2] - world[0]).norm() < 1e-8) continue;
    auto bearingOf = [&](const Vec2& u) {
      return Vec3((u.x() - K.cx) / K.fx, (u.y() - K.cy) / K.fy, 1.0).normalized();
    };
    const std::array<Vec3, 3> bearings = {bearingOf(corr[i1].pixel), bearingOf(corr[i2].pixel),
                                          bearingOf(corr[i3].pixel)};

    for (const Pose& cand : solveP3P(world, bearings)) {
      double score = 0;
      int count = 0;
      std::vector<char> inliers(n, 0);
      for (int i = 0; i < n; ++i) {
        bool valid;
        const Vec2 u = reproject(K, cand, corr[i].world, &valid);
        if (!valid) continue;
        if ((u - corr[i].pixel).norm() < thresholdPx) {
          inliers[i] = 1;
          score += corr[i].weight;
          ++count;
        }
      }
      if (score > bestScore) {
        bestScore = score;
        best.camFromWorld = cand;
        best.inliers = std::move(inliers);
        best.inlierRatio = static_cast<double>(count) / n;
        best.ok = count >= 3;
        if (best.inlierRatio > 0 && best.inlierRatio < 1) {
          const double denom = std::log(1.0 - std::pow(best.inlierRatio, 3));
          if (denom < 0)
            neededIters = std::min<double>(maxIters, std::ceil(std::log(1.0 - confidence) / denom));
        } else if (best.inlierRatio >= 1) {
          neededIters = it + 1;
        }
      }
    }
  }
  if (!best.ok) return best;

  best.camFromWorld = refinePnP(corr, best.inliers, K, best.camFromWorld, 10);
  int count = 0;
  for (int i = 0; i < n; ++i) {
    bool valid;
    const Vec2 u = reproject(K, best.camFromWorld, corr[i].world, &valid);
    best.inliers[i] = valid && (u - corr[i].pixel).norm() < thresholdPx;
    count += best.inliers[i];
  }
  best.inlierRatio = static_cast<double>(count) / n;
  best.ok = count >= 3;
  return best;
}

CoarsePoseResult coarsePose(const std::vector<std::pair<Vec2, Vec2>>& kfToCurrent, const Image& kfDepth,
                            const Image& kfConfidence, const Pose& kfCamToWorld, const Intrinsics& K,
                            const RunConfig& cfg, const Pose& fallbackCamFromWorld, uint64_t seed) {
  CoarsePoseResult out;
  std::vector<Correspondence3d2d> corr;
  corr.reserve(kfToCurrent.size());
  for (const auto& [uKf, uCur] : kfToCurrent) {
    const int px = static_cast<int>(std::lround(uKf.x()));
    const int py = static_cast<int>(std::lround(uKf.y()));
    if (px < 0 || px >= kfDepth.width() || py < 0 || py >= kfDepth.height()) continue;
    const double conf = kfConfidence.at(px, py);
    if (!(conf < cfg.tauDef)) continue;  // keep only low-deformation regions
    const double d = kfDepth.at(px, py);
    if (d <= 0) continue;
    Correspondence3d2d c;
    c.world = backproject(K, uKf, d, kfCamToWorld);
    c.pixel = uCur;
    c.weight = (1.0 - conf) * (1.0 - conf);
    corr.push_back(c);
  }
  if (static_cast<int>(corr.size()) < cfg.minPnpPoints) {
    out.camFromWorld = fallbackCamFromWorld;
    out.usedFallback = true;
    return out;
  }
  const PnPResult pnp =
      solvePnPRansac(corr, K, cfg.ransacThresholdPx, cfg.ransacIters, cfg.ransacConfidence, seed);
  if (!pnp.ok || std::count(pnp.inliers.begin(), pnp.inliers.end(), 1) < cfg.minPnpPoints) {
    out.camFromWorld = fallbackCamFromWorld;
    out.usedFallback = true;
    return out;
  }
  out.camFromWorld = pnp.camFromWorld;
  out.inlierRatio = pnp.inlierRatio;
  return out;
}

FrameEvalResult evaluateFrameObjective(const FrameObjective& obj, const std::vector<DeformedGaussian>& prims,
                                       const Pose& camFromWorld, int iterK, const RunConfig& cfg,
                                       bool wantPoseGrad, bool wantPrimGrads) {
  FrameEvalResult ev;
  RenderOptions ro;
  ro.keepContributors = wantPoseGrad || wantPrimGrads;
  ro.workers = obj.workers;
  static thread_local RenderOutput out;
  renderInto(out, prims, obj.K, camFromWorld, ro);

  Image gradRgb;
  const double lPh =
      photometricL2(out.rgb, *obj.image, *obj.valid, *obj.covis, obj.rigidityWeight, ro.keepContributors ? &gradRgb : nullptr);

  const double lambdaK = cfg.lambdaGeo * annealWeight(iterK, {cfg.annealLambda0, cfg.annealLambdaMin, cfg.annealTau});

  // dense depth term
  MaskImage maskVC = maskAnd(*obj.valid, *obj.covis);
  const Image rf = depthResidualField(out.depth, *obj.priorDepth, maskVC);
  std::vector<double> rs;
  rs.reserve(rf.size());
  for (size_t i = 0; i < rf.size(); ++i)
    if (rf.data()[i] >= 0) rs.push_back(rf.data()[i]);
  const double huberD = huberThresholdFromResiduals(rs, cfg.huberScale);
  const auto depthRes = depthTerm(out.depth, *obj.priorDepth, maskVC, obj.rigidityWeight, rf, huberD, cfg.irlsEps,
                                  lambdaK, ro.keepContributors);

  // sparse trajectory terms
  TrackTermResult trackRes;
  std::vector<Vec3> predDisp;
  if (!obj.trackPoints.empty()) {
    predDisp = predictedDisplacements(obj.trackPoints, prims);
    std::vector<double> r2, r3;
    trackResiduals(obj.trackPoints, predDisp, obj.K, camFromWorld, r2, r3);
    std::vector<double> keep2, keep3;
    for (double r : r2)
      if (r >= 0) keep2.push_back(r);
    for (double r : r3)
      if (r >= 0) keep3.push_back(r);
    const double h2 = huberThresholdFromResiduals(keep2, cfg.huberScale);
    const double h3 = huberThresholdFromResiduals(keep3, cfg.huberScale);
    std::vector<double> g2(r2.size(), 0), g3(r3.size(), 0);
    for (size_t i = 0; i < r2.size(); ++i) {
      if (r2[i] >= 0) g2[i] = irlsWeight(r2[i], h2, cfg.irlsEps);
      if (r3[i] >= 0) g3[i] = irlsWeight(r3[i], h3, cfg.irlsEps);
    }
    trackRes = trackTerms(obj.trackPoints, predDisp, prims, obj.K, camFromWorld, g2, g3, lambdaK, lambdaK,
                          ro.keepContributors);
  }

  ev.loss = lPh + depthRes.loss + trackRes.loss2d + trackRes.loss3d;
  const double geoRaw = lambdaK > 0 ? (depthRes.loss + trackRes.loss2d + trackRes.loss3d) / lambdaK : 0.0;
  ev.selectionLoss = lPh + cfg.lambdaGeo * cfg.annealLambdaMin * geoRaw;

  if (wantPoseGrad || wantPrimGrads) {
    ChannelGrads cg;
    cg.rgb = &gradRgb;
    cg.depth = &depthRes.grad;
    RenderGradients rg = renderBackward(prims, obj.K, camFromWorld, out, cg, obj.workers);
    ev.poseGrad.rot = rg.pose.rot + trackRes.poseGrad.rot;
    ev.poseGrad.trans = rg.pose.trans + trackRes.poseGrad.trans;
    if (wantPrimGrads) {
      if (!trackRes.dispGrad.empty())
        for (size_t i = 0; i < rg.prim.size(); ++i) rg.prim[i].disp += trackRes.dispGrad[i];
      ev.primGrads = std::move(rg.prim);
      ev.hasPrimGrads = true;
    }
  }
  return ev;
}

// short warmup against first-step overshoot, full rate while the iterate
// travels, then exponential decay so the tail settles well below the
// learning rate. Translation travels in a couple of steps at desk scale, so
// its schedule decays much earlier than rotation's.
int poseStepHold(int iters) { return static_cast<int>(0.7 * iters); }

namespace {
double scheduled(int k, int iters, double warmupIters, double holdFrac, double floor) {
  const double warmup = std::min(1.0, (k + 1) / warmupIters);
  const int hold = static_cast<int>(holdFrac * iters);
  if (k < hold) return warmup;
  const int span = std::max(1, iters - hold - 1);
  return std::max(floor, std::pow(floor, static_cast<double>(k - hold) / span));
}
}  // namespace

double poseStepDecay(int k, int iters) { return scheduled(k, iters, 3.0, 0.7, 0.02); }

double poseStepDecayTrans(int k, int iters) { return scheduled(k, iters, 3.0, 0.15, 0.025); }

void PoseOptimizer::reset() {
  mRot_.setZero();
  mTrans_.setZero();
  t_ = 0;
}

Twist PoseOptimizer::step(const Twist& grad, double lrRot, double lrTrans) {
  // normalized block momentum: the learning rate is the literal step length
  // along the smoothed gradient direction
  constexpr double b1 = 0.9, eps = 1e-15;
  ++t_;
  mRot_ = b1 * mRot_ + (1 - b1) * grad.rot;
  mTrans_ = b1 * mTrans_ + (1 - b1) * grad.trans;
  const double c1 = 1.0 - std::pow(b1, t_);
  const Vec3 mr = mRot_ / c1, mt = mTrans_ / c1;
  Twist s;
  s.rot = lrRot * mr / (mr.norm() + eps);
  s.trans = lrTrans * mt / (mt.norm() + eps);
  return s;
}

Twist toPivotGrad(const Twist& g, const Vec3& pivot) {
  return Twist{g.rot - pivot.cross(g.trans), g.trans};
}

Twist fromPivotStep(const Twist& step, const Vec3& pivot) {
  return Twist{step.rot, step.trans - step.rot.cross(pivot)};
}

Vec3 visiblePivot(const std::vector<DeformedGaussian>& prims, const Pose& camFromWorld) {
  Vec3 sum = Vec3::Zero();
  int n = 0;
  for (const DeformedGaussian& g : prims) {
    const Vec3 p = camFromWorld * g.mean;
    if (p.z() > kNearPlane) {
      sum += p;
      ++n;
    }
  }
  return n > 0 ? Vec3(sum / n) : Vec3::Zero();
}

Pose refinePose(const FrameObjective& obj, Pose initCamFromWorld, const RunConfig& cfg,
                std::vector<double>* lossTrace) {
  // deformation fixed during pose refinement, so deform once
  DeformOptions dopt;
  dopt.t = obj.t;
  dopt.residuals = obj.residuals;
  dopt.wantDisplacement = !obj.trackPoints.empty();
  dopt.t0 = obj.tTrack0;
  dopt.residualsT0 = obj.residualsT0;
  const DeformedState ds = deformMap(*obj.map, dopt);

  // the 2D trajectory term is solved in IRLS's canonical weighted
  // least-squares form: predicted surface points are fixed during pose
  // refinement, so each iteration can take one Gauss-Newton polish step
  std::vector<Correspondence3d2d> trackCorr;
  if (!obj.trackPoints.empty()) {
    const std::vector<Vec3> pred = predictedDisplacements(obj.trackPoints, ds.gaussians);
    for (size_t i = 0; i < obj.trackPoints.size(); ++i) {
      const TrackPoint& p = obj.trackPoints[i];
      if (!p.masked || p.pixelWeight <= 0) continue;
      Correspondence3d2d c;
      c.world = p.seedCamToWorld * p.x0 + pred[i];
      c.pixel = p.ut;
      c.weight = p.pixelWeight;
      trackCorr.push_back(c);
    }
  }

  Pose pose = initCamFromWorld;
  Pose bestPose = pose;
  double bestLoss = std::numeric_limits<double>::max();
  PoseOptimizer opt;
  const Vec3 pivot = visiblePivot(ds.gaussians, pose);

  for (int k = 0; k < cfg.refineIters; ++k) {
    const FrameEvalResult ev = evaluateFrameObjective(obj, ds.gaussians, pose, k, cfg, true, false);
    if (lossTrace) lossTrace->push_back(ev.loss);
    if (ev.selectionLoss < bestLoss) {
      bestLoss = ev.selectionLoss;
      bestPose = pose;
    }
    const double decayR = poseStepDecay(k, cfg.refineIters);
    const double decayT = poseStepDecayTrans(k, cfg.refineIters);
    Twist step = opt.step(toPivotGrad(ev.poseGrad, pivot), cfg.lrCamRot * decayR, cfg.lrCamTransMm * decayT);
    step.rot = -step.rot;
    step.trans = -step.trans;
    pose = se3Exp(fromPivotStep(step, pivot)) * pose;
    if (static_cast<int>(trackCorr.size()) >= cfg.minPnpPoints) pose = refinePnP(trackCorr, {}, obj.K, pose, 1);
  }
  const FrameEvalResult last = evaluateFrameObjective(obj, ds.gaussians, pose, cfg.refineIters, cfg, false, false);
  if (lossTrace) lossTrace->push_back(last.loss);
  if (last.selectionLoss < bestLoss) bestPose = pose;
  return bestPose;
}

namespace {

// deterministic flat indexing over a residual set
struct ResidualIndexer {
  std::vector<std::tuple<int, int, int64_t, int>> slots;  // prim, attr, basisId, dim
  explicit ResidualIndexer(const ResidualSet& rs) {
    for (const auto& [prim, e] : rs.prims)
      for (int a = 0; a < kNumAttrs; ++a)
        for (const auto& [id, v] : e.attr[a])
          for (int d = 0; d < v.size(); ++d) slots.emplace_back(prim, a, id, d);
  }
};

}  // namespace

ResidualSet estimateFrameDeformation(const FrameObjective& obj, const Pose& camFromWorld,
                                     const ResidualSet* previousResiduals, const RunConfig& cfg,
                                     std::vector<double>* lossTrace) {
  const CanonicalMap& map = *obj.map;

  // residuals only for gated primitives, non-frozen bases; warm-started
  ResidualSet rs;
  for (size_t i = 0; i < map.size(); ++i) {
    if (!(map.primitives[i].deformationProbability() > cfg.epsDef)) continue;
    auto& entry = rs.prims[static_cast<int>(i)];
    for (int a = 0; a < kNumAttrs; ++a)
      for (const TemporalBasis& b : map.bases[i].attr[a]) {
        if (b.frozen) continue;
        VecX v = VecX::Zero(attrDim(static_cast<Attr>(a)));
        if (previousResiduals)
          if (const VecX* pv = previousResiduals->find(static_cast<int>(i), static_cast<Attr>(a), b.id))
            if (pv->size() == v.size()) v = *pv;
        entry.attr[a].emplace_back(b.id, v);
      }
  }
  if (rs.prims.empty()) return rs;

  const ResidualIndexer idx(rs);
  Adam adam(idx.slots.size());
  MapGradients mg;
  mg.resizeFor(map);

  for (int k = 0; k < cfg.deformIters; ++k) {
    DeformOptions dopt;
    dopt.t = obj.t;
    dopt.residuals = &rs;
    dopt.wantDisplacement = !obj.trackPoints.empty();
    dopt.t0 = obj.tTrack0;
    dopt.residualsT0 = obj.residualsT0;
    const DeformedState ds = deformMap(map, dopt);

    FrameEvalResult ev = evaluateFrameObjective(obj, ds.gaussians, camFromWorld, k, cfg, false, true);

    mg.setZero();
    deformBackward(map, ds.ctx, ev.primGrads, &rs, mg);

    double regLoss = residualRegularizer(rs, previousResiduals, cfg.lambdaReg, cfg.lambdaTem, &mg.residual);
    if (lossTrace) lossTrace->push_back(ev.loss + regLoss);

    adam.beginStep();
    for (size_t s = 0; s < idx.slots.size(); ++s) {
      const auto& [prim, a, id, d] = idx.slots[s];
      VecX* v = rs.find(prim, static_cast<Attr>(a), id);
      const VecX* g = mg.residual.find(prim, static_cast<Attr>(a), id);
      const double grad = g ? (*g)[d] : 0.0;
      const double lr = a == static_cast<int>(Attr::Mean) ? cfg.lrResidualMm : cfg.lrResidual;
      (*v)[d] -= adam.step(s, grad, lr);
    }
  }
  return rs;
}

double relativeResidualRatio(const ResidualSet& residuals, const CanonicalMap& map, double eps) {
  if (residuals.prims.empty()) return 0.0;
  double sum = 0;
  int count = 0;
  for (const auto& [prim, e] : residuals.prims) {
    double primSum = 0;
    for (const auto& [id, v] : e.attr[static_cast<int>(Attr::Mean)]) {
      double baseNorm = 0;
      for (const TemporalBasis& b : map.bases[prim][Attr::Mean])
        if (b.id == id) {
          baseNorm = b.weight.norm();
          break;
        }
      primSum += v.norm() / (baseNorm + eps);
    }
    sum += primSum;
    ++count;
  }
  return count > 0 ? sum / count : 0.0;
}

const char* keyframeReasonName(KeyframeReason r) {
  switch (r) {
    case KeyframeReason::None: return "none";
    case KeyframeReason::Covis: return "covis";
    case KeyframeReason::Deformation: return "deformation";
    case KeyframeReason::Motion: return "motion";
    case KeyframeReason::Interval: return "interval";
  }
  return "?";
}

KeyframeReason keyframeDecision(const KeyframeSignals& s, const RunConfig& cfg) {
  if (s.covisRatio < cfg.kfCovisRatio) return KeyframeReason::Covis;
  if (s.rDef > cfg.kfRdef) return KeyframeReason::Deformation;
  if (s.translationMm > cfg.kfTranslationMm) return KeyframeReason::Motion;
  if (s.framesSinceKeyframe > cfg.kfInterval) return KeyframeReason::Interval;
  return KeyframeReason::None;
}

}  // namespace nrgs
