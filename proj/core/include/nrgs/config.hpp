// Run configuration: every threshold, weight and learning rate of the
// pipeline, with defaults and a flat key-value file format. Unknown keys are
// rejected; values are range-checked.
//
// Learning rates attached to metric quantities (translations, Gaussian means,
// mean-attribute basis weights) are expressed in millimeters; dimensionless
// parameters (rotations, log-scales, logits) keep their raw step sizes.
#pragma once

#include <cstdint>
#include <string>

namespace nrgs {

struct RunConfig {
  // --- measurement preprocessing
  double validDelta = 0.2;          // intensity validity threshold
  double tauTransmittance = 0.1;    // map-mask transparency threshold

  // --- geometric loss
  double annealLambda0 = 1.0;
  double annealLambdaMin = 0.01;
  double annealTau = 10.0;
  double lambdaGeo = 1.0;
  double huberScale = 1.345;        // threshold = scale x median |r|
  double irlsEps = 1e-6;

  // --- deformable tracking
  double tauDef = 0.5;              // coarse-stage confidence filter
  int refineIters = 40;
  double lrCamRot = 4e-4;           // rad
  double lrCamTransMm = 1.0;        // mm (1e-3 in meters)
  double epsDef = 0.5;              // residual gating threshold
  double lambdaReg = 0.01;
  double lambdaTem = 0.01;
  int deformIters = 40;
  double lrResidualMm = 0.5;        // mean-attribute residuals, mm
  double lrResidual = 5e-4;         // scale/rotation residuals
  double ransacThresholdPx = 2.0;
  int ransacIters = 500;
  double ransacConfidence = 0.99;
  int minPnpPoints = 6;

  // --- keyframe criteria
  double kfCovisRatio = 0.75;
  double kfRdef = 0.1;
  double kfTranslationMm = 8.0;
  int kfInterval = 20;

  // --- deformable mapping
  int windowSize = 7;
  int windowPoseIters = 20;
  int baIters = 60;
  int baResponsibilityEvery = 10;   // management runs once at baIters/2
  double lambdaW = 1.0;
  double lambdaTemp = 0.01;
  double lambdaSpatial = 0.01;
  double lrMapMeanMm = 0.16;        // mm (1.6e-4 in meters)
  double lrMapScale = 1.6e-4;
  double lrMapRot = 1.6e-4;
  double lrColor = 2.5e-3;
  double lrOpacity = 5e-2;
  double lrDefLogit = 5e-2;
  double lrBasisWeightMm = 0.16;    // mean-attribute weights, mm
  double lrBasisWeight = 1.6e-4;    // scale/rotation weights
  double lrBaCamRot = 2e-4;
  double lrBaCamTransMm = 0.5;      // mm (5e-4 in meters)

  // --- Bayesian responsibility
  double beta = 200.0;
  double etaDecay = 40.0;
  double aggEps = 1e-6;
  double piDeform = 0.5;            // pi_r = 1 - piDeform

  // --- deformation field management
  bool managementEnabled = true;
  double deltaCov = 0.5;
  double tauRgb = 0.05;
  double tauProb = 0.5;
  double tauErr = 1.0;
  double etaMu = 0.5;
  double etaSigma = 0.1;
  double deltaAct = 0.05;

  // --- map extension / initialization
  int extensionStride = 4;
  double tauNewTransmittance = 0.1;
  double newPrimWd = 0.6;
  int initBasesPerAttr = 5;
  double basisExtentFactor = 0.7;
  int knn = 8;
  int initFirstFrameIters = 300;
  double initSsimLambda = 0.2;

  // --- tracking weighting ablation
  bool confidenceWeighting = true;

  // --- run plumbing
  std::string datasetDir;
  std::string outputDir;
  std::string priorSource = "files";  // "files" is the only on-disk provider
  uint64_t seed = 0;
  int threads = 1;                    // renderer worker threads (0 = hardware concurrency)
  bool dumpChannels = false;

  void validate() const;  // throws std::invalid_argument on out-of-range values

  /// Applies `key = value` lines; '#' starts a comment. Unknown keys throw.
  void applyFile(const std::string& path);
  void applyKeyValue(const std::string& key, const std::string& value);
  void save(const std::string& path) const;
};

}  // namespace nrgs
