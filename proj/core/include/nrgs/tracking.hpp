// Deformable tracking: confidence-weighted PnP with RANSAC for the coarse
// pose, rigidity-weighted photometric+geometric pose refinement, per-frame
// residual deformation estimation, and keyframe selection.
#pragma once

#include <array>
#include <optional>
#include <vector>

#include "nrgs/config.hpp"
#include "nrgs/objectives.hpp"
#include "nrgs/renderer.hpp"

namespace nrgs {

struct Correspondence3d2d {
  Vec3 world = Vec3::Zero();
  Vec2 pixel = Vec2::Zero();
  double weight = 1.0;  // (1 - confidence)^2
};

/// Grunert P3P: up to four camera-from-world candidates from three world
/// points and their unit bearing vectors.
std::vector<Pose> solveP3P(const std::array<Vec3, 3>& world, const std::array<Vec3, 3>& bearing);

struct PnPResult {
  Pose camFromWorld;
  double inlierRatio = 0;
  std::vector<char> inliers;
  bool ok = false;
};

/// P3P inside RANSAC (weighted inlier score), followed by a weighted IRLS
/// Gauss-Newton refit on the inliers.
PnPResult solvePnPRansac(const std::vector<Correspondence3d2d>& corr, const Intrinsics& K, double thresholdPx,
                         int maxIters, double confidence, uint64_t seed);

/// Weighted Gauss-Newton on the reprojection error, IRLS-weighted toward the
/// sum of weighted residual norms.
Pose refinePnP(const std::vector<Correspondence3d2d>& corr, const std::vector<char>& inliers, const Intrinsics& K,
               Pose camFromWorld, int iters);

struct CoarsePoseResult {
  Pose camFromWorld;
  double inlierRatio = 0;
  bool usedFallback = false;
};

/// Deformation-weighted coarse pose: filters keyframe->current pixel
/// correspondences by the keyframe's rendered confidence, back-projects
/// through its rendered depth, and solves weighted PnP. Falls back to the
/// supplied pose when fewer than cfg.minPnpPoints correspondences survive.
CoarsePoseResult coarsePose(const std::vector<std::pair<Vec2, Vec2>>& kfToCurrent, const Image& kfDepth,
                            const Image& kfConfidence, const Pose& kfCamToWorld, const Intrinsics& K,
                            const RunConfig& cfg, const Pose& fallbackCamFromWorld, uint64_t seed);

/// Inputs shared by pose refinement and per-frame deformation estimation.
/// The deformed state is evaluated at time t from `map` + `residuals`.
struct FrameObjective {
  const CanonicalMap* map = nullptr;
  const ResidualSet* residuals = nullptr;  // deformation approximation at t
  double t = 0;
  Intrinsics K;
  const Image* image = nullptr;
  const MaskImage* valid = nullptr;
  const MaskImage* covis = nullptr;
  const Image* rigidityWeight = nullptr;  // (1 - M_def), null disables weighting
  const Image* priorDepth = nullptr;
  std::vector<TrackPoint> trackPoints;    // blends frozen against the seed frame
  double tTrack0 = 0;
  const ResidualSet* residualsT0 = nullptr;
  int workers = 0;
};

/// One evaluation of L_ph + annealed L_geo for a deformed state and pose.
/// IRLS weights come from the evaluated state's own residuals; track blend
/// weights stay frozen inside obj.trackPoints.
struct FrameEvalResult {
  double loss = 0;           // photometric + annealed geometric (optimized)
  double selectionLoss = 0;  // photometric + lambdaMin-weighted geometric;
                             // iteration-independent, used for best-iterate picks
  Twist poseGrad;
  std::vector<PrimGrad> primGrads;
  bool hasPrimGrads = false;
};

FrameEvalResult evaluateFrameObjective(const FrameObjective& obj, const std::vector<DeformedGaussian>& prims,
                                       const Pose& camFromWorld, int iterK, const RunConfig& cfg,
                                       bool wantPoseGrad, bool wantPrimGrads);

/// Pose step-size schedule: full rate for the first 70% of iterations, then
/// exponential decay to 2.5% so the final iterates settle. Optimizers drop
/// their momentum at the boundary.
int poseStepHold(int iters);
double poseStepDecay(int k, int iters);
double poseStepDecayTrans(int k, int iters);

/// Pose optimizers work in twist coordinates whose rotation pivots about a
/// camera-frame point (the visible scene centroid); this decouples rotation
/// from translation in the descent directions.
Twist toPivotGrad(const Twist& g, const Vec3& pivot);
Twist fromPivotStep(const Twist& step, const Vec3& pivot);

/// Normalized block momentum over the rotation and translation halves of a
/// twist: the step length equals the learning rate along the smoothed
/// gradient direction.
class PoseOptimizer {
 public:
  void reset();
  Twist step(const Twist& grad, double lrRot, double lrTrans);

 private:
  Vec3 mRot_ = Vec3::Zero(), mTrans_ = Vec3::Zero();
  int t_ = 0;
};

/// Mean camera-frame position of the primitives visible under `camFromWorld`.
Vec3 visiblePivot(const std::vector<DeformedGaussian>& prims, const Pose& camFromWorld);

/// Second-stage pose refinement: `iters` adaptive first-order steps on the
/// camera twist; returns the iterate with the lowest loss.
Pose refinePose(const FrameObjective& obj, Pose initCamFromWorld, const RunConfig& cfg,
                std::vector<double>* lossTrace = nullptr);

/// Per-frame residual deformation: optimizes delta-omega for primitives with
/// w_d > eps_def (warm-started from the previous frame), holding pose, basis
/// centers and extents fixed.
ResidualSet estimateFrameDeformation(const FrameObjective& obj, const Pose& camFromWorld,
                                     const ResidualSet* previousResiduals, const RunConfig& cfg,
                                     std::vector<double>* lossTrace = nullptr);

double relativeResidualRatio(const ResidualSet& residuals, const CanonicalMap& map, double eps);

enum class KeyframeReason { None, Covis, Deformation, Motion, Interval };
const char* keyframeReasonName(KeyframeReason r);

struct KeyframeSignals {
  double covisRatio = 1.0;
  double rDef = 0.0;
  double translationMm = 0.0;
  int framesSinceKeyframe = 0;
};

/// First triggered criterion in the order covis, deformation, motion,
/// interval; None when nothing fires.
KeyframeReason keyframeDecision(const KeyframeSignals& s, const RunConfig& cfg);

}  // namespace nrgs
