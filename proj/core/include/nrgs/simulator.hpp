// Synthetic deformable-scene generator: a procedurally textured height-field
// surface rendered with the project's own forward renderer, with full ground
// truth (poses, depth, 2D/3D tracks, per-point rigidity labels).
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nrgs/gaussian_map.hpp"
#include "nrgs/geometry.hpp"
#include "nrgs/priors.hpp"

namespace nrgs {

struct SinusoidSpec {
  double amplitudeMm = 2.0;
  double spatialFreq = 1.0 / 30.0;  // cycles per mm along `direction`
  double temporalFreq = 0.02;       // cycles per frame
  double phase = 0.0;               // radians
  Vec2 direction = Vec2(1, 0);      // in-surface direction, normalized on use
};

struct SceneSpec {
  int gridX = 64, gridY = 64;
  double extentMm = 120.0;
  double reliefAmpMm = 4.0;
  uint64_t textureSeed = 7;
  int textureOctaves = 4;

  // points with surface x >= deformRegionMinX deform; +inf disables
  double deformRegionMinX = 0.0;
  std::vector<SinusoidSpec> sinusoids;

  int frames = 120;
  int imageWidth = 160, imageHeight = 128;
  double focalPx = 150.0;

  std::vector<Vec3> trajectoryControl;  // camera positions, look-at = surface center

  double noiseDepthSigma = 0.0;    // multiplicative
  double noiseTrackPxSigma = 0.0;  // additive on current 2D endpoints
  double noiseTrackMmSigma = 0.0;  // additive on current 3D endpoints

  int trackStridePx = 6;
  int trackReseedFrames = 12;

  void validate() const;  // throws std::invalid_argument ("InvalidSpec")
  static SceneSpec load(const std::string& path);
  void save(const std::string& path) const;
};

struct GroundTruth {
  Intrinsics K;
  std::vector<double> times;               // normalized [0,1]
  std::vector<Pose> camToWorld;            // per frame
  std::vector<Image> depth;                // rendered blended depth, pre-noise
  std::vector<std::vector<Track>> tracks;  // clean tracks per frame
  std::vector<Vec3> surfaceFrame0;         // vertex positions at frame 0
  std::vector<uint8_t> rigidLabel;         // per vertex, 1 = rigid
  double gridSpacingMm = 0;
};

/// Evaluates the deformation model directly: world position of vertex v at
/// frame f (the independent oracle the dataset must agree with).
Vec3 surfacePointAt(const SceneSpec& spec, const Vec3& restPoint, bool deforming, int frame);

/// Renders and writes the dataset (rgb/, depth/, tracks/, intrinsics.txt,
/// gt_traj.txt, gt_surface.csv, scene_spec.txt) and returns the ground truth.
/// Pass an empty outDir to generate in memory only.
GroundTruth generate(const SceneSpec& spec, const std::string& outDir, uint64_t seed);

/// ROC AUC of per-primitive scores against ground-truth deformation labels;
/// primitives are matched to the nearest frame-0 surface point within 2x the
/// grid spacing (unmatched primitives are skipped). Returns 0.5 when a class
/// is empty.
double labelAuc(const std::vector<double>& scores, const std::vector<Vec3>& primMeans, const GroundTruth& gt);

/// Rank-based ROC AUC with tie handling (exposed for the statistical tests).
double rocAuc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Serves the ground truth as priors, optionally perturbed with seeded
/// Gaussian noise. Stateless per frame: the same frame always yields the same
/// sample.
class OraclePriorProvider : public PriorProvider {
 public:
  OraclePriorProvider(const GroundTruth& gt, double depthSigma, double trackPxSigma, double trackMmSigma,
                      uint64_t seed);
  Priors acquire(int frame) override;

 private:
  const GroundTruth& gt_;
  double depthSigma_, trackPxSigma_, trackMmSigma_;
  uint64_t seed_;
};

}  // namespace nrgs
