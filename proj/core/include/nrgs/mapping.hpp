// Deformable mapping: sliding-window pose optimization, map extension,
// Bayesian deformation-probability estimation through dual-hypothesis
// rendering, global deformable bundle adjustment with dynamic deformation
// field management, and system initialization.
#pragma once

#include <map>
#include <vector>

#include "nrgs/config.hpp"
#include "nrgs/priors.hpp"
#include "nrgs/tracking.hpp"

namespace nrgs {

struct Keyframe {
  int frame = -1;
  double time = 0;
  Pose camFromWorld;
  Intrinsics K;
  Image image;
  MaskImage valid;
  MaskImage covis;
  Image priorDepth;
  std::vector<Track> tracks;            // raw provider tracks (for PnP joining)
  std::vector<TrackPoint> trackPoints;  // blends frozen against the seed frame
  double tTrack0 = 0;
  int track0Frame = -1;
};

struct KeyframeWindow {
  std::vector<Keyframe> entries;  // time-ordered, at most cfg.windowSize

  bool empty() const { return entries.empty(); }
  size_t size() const { return entries.size(); }
  Keyframe& back() { return entries.back(); }
};

/// Per-frame residual sets for the whole run, keyed by frame index. Mapping
/// owns remapping these when management merges or removes bases.
using ResidualStore = std::map<int, ResidualSet>;

const ResidualSet* findResiduals(const ResidualStore& store, int frame);

/// Per-keyframe renders of the current (learned-gating) state plus the
/// rigidity weight map 1 - M_def.
struct WindowRenders {
  std::vector<RenderOutput> current;
  std::vector<Image> rigidityWeight;
};

WindowRenders computeWindowRenders(const KeyframeWindow& window, const CanonicalMap& map,
                                   const ResidualStore& residuals, const RunConfig& cfg);

/// Confidence-weighted photometric+geometric descent on every window pose;
/// map parameters are untouched.
void optimizeWindowPoses(KeyframeWindow& window, const CanonicalMap& map, const ResidualStore& residuals,
                         const RunConfig& cfg, std::vector<double>* lossTrace = nullptr);

/// Inserts primitives for high-transmittance pixels outside the tracked
/// region, sampling the prior depth on a stride grid. Returns new indices.
std::vector<int> extendMap(CanonicalMap& map, const Intrinsics& K, const Pose& camFromWorld,
                           const Image& transmittance, const MaskImage& trackM, const Image& priorDepth,
                           const Image& image, double time, const RunConfig& cfg);

struct HypothesisStats {
  // n x M accumulators, column per window slot
  Eigen::MatrixXd eR, eD, vis;
  std::vector<double> errorScore;  // per primitive, for error-driven densification
};

/// Element-wise error attribution under the forced-rigid and
/// forced-deformable hypotheses, accumulated over the current-state
/// contributor lists.
HypothesisStats dualHypothesisStats(const KeyframeWindow& window, const CanonicalMap& map,
                                    const ResidualStore& residuals, const WindowRenders& renders,
                                    const RunConfig& cfg);

/// Posterior that a primitive follows the deformable mode; the sigmoid
/// log-odds form, equal to the direct Bayes quotient.
double posteriorResponsibility(double eR, double eD, double piD, double piR, double beta);

/// Visibility- and recency-weighted log-odds fusion over the window.
/// `evidenceOut`, when given, receives the total composite weight per
/// primitive (zero means the posterior is the uninformative prior).
std::vector<double> aggregateResponsibility(const HypothesisStats& stats, const std::vector<double>& kfTimes,
                                            double tNow, const RunConfig& cfg,
                                            std::vector<double>* evidenceOut = nullptr);

struct ManagementReport {
  struct PerAttr {
    int insertedCoverage = 0;
    int insertedError = 0;
    int merged = 0;   // bases eliminated by merging
    int pruned = 0;
    int frozen = 0;
  };
  std::array<PerAttr, kNumAttrs> attr;
  int total(int what) const;  // 0..4 in field order
};

/// Coverage/error densification, merging of mutually similar bases, and
/// pruning/freezing by relative effective activation. Stored residuals are
/// remapped when bases merge and dropped when bases are removed.
ManagementReport manageDeformationField(CanonicalMap& map, const std::vector<double>& windowTimes, double tNow,
                                        const std::vector<double>& errorScore, const RunConfig& cfg,
                                        ResidualStore* residuals);

struct BaResult {
  std::vector<double> lossTrace;
  ManagementReport management;
  bool managementRan = false;
  std::vector<double> lastResponsibility;
};

/// Alternating responsibility estimation and joint descent over canonical
/// attributes, basis weights, logits, and window poses; management runs once
/// at the iteration midpoint.
BaResult globalDeformableBA(CanonicalMap& map, KeyframeWindow& window, ResidualStore& residuals,
                            const RunConfig& cfg);

/// Track points for one seed epoch: blend weights sampled from the seed
/// render's contributor lists at the start pixels, masks and rigidity
/// weights from the current frame.
std::vector<TrackPoint> buildTrackPoints(const std::vector<Track>& tracks, int seedFrame,
                                         const RenderOutput& seedRender, const Pose& seedCamToWorld,
                                         const MaskImage& validAtT, const MaskImage& covisAtT);

/// Per-frame preprocessing shared by initialization and the main loop: the
/// validity mask from the image, the map mask from a transmittance render of
/// the predicted state (previous-frame deformation approximation), the track
/// hull mask, and their intersection.
struct PreprocessResult {
  MaskSet masks;
  RenderOutput predictedRender;
};

PreprocessResult preprocessFrame(const CanonicalMap& map, const ResidualSet* approxResiduals, double t,
                                 const Pose& predictedCamFromWorld, const Intrinsics& K, const Image& image,
                                 const std::vector<Track>& tracks, const RunConfig& cfg);

struct InitFrame {
  int frame = -1;
  double time = 0;
  Intrinsics K;
  Image image;
  MaskImage valid;
  Priors priors;
};

struct InitResult {
  CanonicalMap map;
  std::vector<Pose> camFromWorld;  // per init frame
  std::vector<double> firstFrameLossTrace;
  BaResult ba;
};

/// Four-step bootstrap: canonical map from frame 0 (identity pose) with a
/// photometric+depth fit, pose-only alignment of the remaining frames,
/// deformation attribute initialization, and one global deformable BA pass.
/// Throws std::invalid_argument ("InsufficientFrames").
InitResult initializeSystem(const std::vector<InitFrame>& frames, KeyframeWindow& window,
                            ResidualStore& residuals, const RunConfig& cfg);

}  // namespace nrgs
