// Orchestration: dataset ingestion, the per-frame tracking/mapping loop,
// persistence of trajectories, snapshots and logs, and run evaluation.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nrgs/config.hpp"
#include "nrgs/evaluation.hpp"
#include "nrgs/mapping.hpp"
#include "nrgs/simulator.hpp"

namespace nrgs {

struct Dataset {
  std::string dir;
  Intrinsics K;
  int frames = 0;

  /// Throws std::runtime_error ("DatasetNotFound") when the directory or its
  /// required files are missing.
  static Dataset open(const std::string& dir);

  Image loadImage(int frame) const;
  double time(int frame) const { return frames > 1 ? static_cast<double>(frame) / (frames - 1) : 0.0; }
};

struct RunArtifacts {
  std::vector<double> times;
  std::vector<Pose> camToWorld;  // final per-frame estimates
  int keyframeCount = 0;
  int finalActiveBasisCount = 0;
  std::vector<double> finalDeformationProbability;  // per primitive
  std::vector<Vec3> finalMeans;
  std::string trajectoryPath, mapPath, residualPath;
};

/// Runs the full pipeline on cfg.datasetDir, writing all artifacts into
/// cfg.outputDir. Deterministic for a fixed config and seed.
RunArtifacts runPipeline(const RunConfig& cfg, PriorProvider* provider = nullptr);

/// Re-renders one frame from a saved run (map snapshot + trajectory +
/// per-frame residuals).
struct RunRender {
  Image rgb, depth, transmittance, confidence;
};
RunRender renderRunFrame(const std::string& runDir, const std::string& datasetDir, int frame);

struct EvalReport {
  TrajectoryMetrics ateMetrics;
  std::vector<double> psnrPerFrame, ssimPerFrame;
  double meanPsnr = 0, meanSsim = 0;
};

/// ATE against the dataset's gt_traj.txt plus per-frame PSNR/SSIM of the
/// saved map re-rendered along the estimated trajectory. Writes metrics.csv,
/// summary.csv and plot images into outDir (skipped when outDir is empty).
EvalReport evaluateRun(const std::string& runDir, const std::string& datasetDir, const std::string& outDir,
                       AteAlignment alignment = AteAlignment::Rigid);

}  // namespace nrgs
