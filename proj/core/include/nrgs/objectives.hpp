// Loss terms and schedules: masked photometric losses, the annealed IRLS
// robust geometric loss, the L1+SSIM mix used by initialization, BCE
// supervision of deformation probabilities, and smoothness regularizers.
#pragma once

#include <vector>

#include "nrgs/gaussian_map.hpp"
#include "nrgs/geometry.hpp"
#include "nrgs/image.hpp"

namespace nrgs {

struct AnnealSchedule {
  double lambda0 = 1.0;
  double lambdaMin = 0.01;
  double tau = 10.0;
};

/// lambda0 * exp(-k / tau) + lambdaMin
double annealWeight(int k, const AnnealSchedule& s);

/// Huber penalty, quadratic below the threshold and linear above.
double huberRho(double r, double delta);
double huberRhoPrime(double r, double delta);

/// IRLS weight gamma = rho'(r) / (r + eps) for r >= 0.
double irlsWeight(double r, double huberDelta, double eps);

/// 1.345 x median of the given non-negative residuals (0 when empty).
double huberThresholdFromResiduals(std::vector<double> residuals, double scale = 1.345);

/// Masked mean squared RGB error over the full image domain (Eq. pinned by the
/// 2x1-image example: the divisor is W*H, not the masked count). `pixelWeight`
/// multiplies per-pixel terms when given. `grad` (same shape as rendered)
/// receives d loss / d rendered when non-null.
double photometricL2(const Image& rendered, const Image& observed, const MaskImage& valid, const MaskImage& covis,
                     const Image* pixelWeight, Image* grad);

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), constants
/// (0.01 L)^2 / (0.03 L)^2 with L = 1, window renormalized at borders.
double ssimMean(const Image& a, const Image& b);

/// lambda * mean|I - I^| + (1 - lambda) * (1 - SSIM); optional gradient
/// w.r.t. `rendered`.
double photometricSsimMix(const Image& rendered, const Image& observed, double lambda, Image* grad = nullptr);

/// Binary cross entropy -[w* ln w + (1-w*) ln(1-w)], inputs clamped to
/// [1e-6, 1-1e-6].
double bceLoss(double w, double wStar);
/// d BCE / d logit(w) = w - w*.
double bceGradLogit(double w, double wStar);

// ---------------------------------------------------------------------------
// Robust geometric terms. IRLS weights are evaluated from the residuals the
// caller passes in (typically the pre-step residuals of the same iteration)
// and held fixed inside the term.

/// |D^ - D| where the prior depth is valid (> 0) and the mask is set; -1 marks
/// excluded pixels.
Image depthResidualField(const Image& rendered, const Image& prior, const MaskImage& maskValCovis);

struct DepthTermResult {
  double loss = 0;
  Image grad;  // w.r.t. rendered depth, pre-scaled by lambda
};

/// lambda * (1/|Omega|) sum mask * w * 1/2 gamma r^2 with gamma from the given
/// residual field and Huber threshold.
DepthTermResult depthTerm(const Image& rendered, const Image& prior, const MaskImage& maskValCovis,
                          const Image* pixelWeight, const Image& residualField, double huberDelta, double eps,
                          double lambda, bool wantGrad);

/// One tracked point: observed endpoints plus the frozen blend weights of the
/// start-pixel contributors in the seed-frame render. The 3D endpoints live
/// in the seed frame's camera coordinates; `seedCamToWorld` (the estimated
/// pose of the seed frame, held constant) maps them into the world.
struct TrackPoint {
  Vec2 u0 = Vec2::Zero();
  Vec2 ut = Vec2::Zero();
  Vec3 x0 = Vec3::Zero();   // seed-frame camera coordinates, mm
  Vec3 xt = Vec3::Zero();   // seed-frame camera coordinates, mm
  Pose seedCamToWorld;
  std::vector<std::pair<int, double>> blend;
  bool masked = true;       // val AND covis at the current pixel
  double pixelWeight = 1.0; // rigidity weight at the current pixel
};

/// Predicted 3D displacement per point: sum of blend-weighted per-primitive
/// displacements.
std::vector<Vec3> predictedDisplacements(const std::vector<TrackPoint>& pts, const std::vector<DeformedGaussian>& prims);

/// Residual norms of the 3D and 2D trajectory terms under the current state.
/// Points whose prediction falls behind the camera are skipped (flag -1).
void trackResiduals(const std::vector<TrackPoint>& pts, const std::vector<Vec3>& predDisp, const Intrinsics& K,
                    const Pose& camFromWorld, std::vector<double>& r2d, std::vector<double>& r3d);

struct TrackTermResult {
  double loss2d = 0, loss3d = 0;
  std::vector<Vec3> dispGrad;  // per primitive, chained through frozen blends
  Twist poseGrad;              // from the 2D reprojection term only
};

TrackTermResult trackTerms(const std::vector<TrackPoint>& pts, const std::vector<Vec3>& predDisp,
                           const std::vector<DeformedGaussian>& prims, const Intrinsics& K, const Pose& camFromWorld,
                           const std::vector<double>& gamma2d, const std::vector<double>& gamma3d, double lambda2d,
                           double lambda3d, bool wantGrad);

// ---------------------------------------------------------------------------
// Regularizers over deformation probabilities and per-frame residuals.

/// sum_i (w_i - wPrev_i)^2; gradient added into gradDefLogit when non-null.
double wdTemporalLoss(const CanonicalMap& map, const std::vector<double>& previousWd, double lambda,
                      std::vector<double>* gradDefLogit);

/// sum_i sum_{j in N(i)} (w_i - w_j)^2 over the neighbor graph.
double wdSpatialLoss(const CanonicalMap& map, double lambda, std::vector<double>* gradDefLogit);

/// lambdaReg * |d|^2 + lambdaTem * |d - dPrev|^2 over matching keys; gradient
/// accumulated into gradOut (same key layout as d) when non-null.
double residualRegularizer(const ResidualSet& d, const ResidualSet* dPrev, double lambdaReg, double lambdaTem,
                           ResidualSet* gradOut);

}  // namespace nrgs
