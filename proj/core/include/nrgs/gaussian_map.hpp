// Deformation-aware canonical Gaussian map: primitives carrying a deformation
// probability logit, per-attribute 1D Gaussian temporal bases, per-frame
// residual weights, and the gated deformation evaluation with its adjoint.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "nrgs/geometry.hpp"

namespace nrgs {

enum class Attr : int { Mean = 0, Scale = 1, Rotation = 2 };
inline constexpr int kNumAttrs = 3;
inline constexpr int attrDim(Attr a) { return a == Attr::Rotation ? 4 : 3; }
inline constexpr std::array<Attr, 3> kAllAttrs{Attr::Mean, Attr::Scale, Attr::Rotation};
const char* attrName(Attr a);

double sigmoid(double x);
double logit(double p);

/// 1D Gaussian basis phi(t; tau, sigma) = exp(-(t-tau)^2 / (2 sigma^2)).
/// Throws std::domain_error ("NonPositiveExtent") when sigma <= 0.
double basisEval(double t, double tau, double sigma);

struct TemporalBasis {
  int64_t id = 0;         // stable identity, survives management rewrites
  double center = 0.0;    // tau, normalized sequence time
  double extent = 0.0;    // sigma > 1e-6
  VecX weight;            // omega, dim = attrDim
  bool frozen = false;
};

struct BasisSet {
  std::array<std::vector<TemporalBasis>, kNumAttrs> attr;

  std::vector<TemporalBasis>& operator[](Attr a) { return attr[static_cast<int>(a)]; }
  const std::vector<TemporalBasis>& operator[](Attr a) const { return attr[static_cast<int>(a)]; }
};

struct GaussianPrimitive {
  Vec3 mean = Vec3::Zero();       // canonical position, mm
  Vec3 logScale = Vec3::Zero();   // exposed scale is exp(logScale), mm
  Quat rot = Quat::Identity();    // unit quaternion
  double opacityLogit = 0.0;      // exposed opacity is sigmoid(opacityLogit)
  Vec3 rgb = Vec3::Zero();        // degree-0 color in [0,1]
  double defLogit = 0.0;          // exposed w_d is sigmoid(defLogit)

  double opacity() const { return sigmoid(opacityLogit); }
  double deformationProbability() const { return sigmoid(defLogit); }
};

/// Stores sigmoid^-1(w) as the logit. Throws std::domain_error ("OutOfRange")
/// unless 0 < w < 1.
void setDeformationProbability(GaussianPrimitive& g, double w);

/// Per-frame additive corrections to basis weights, keyed by stable basis id.
struct ResidualSet {
  struct PrimEntry {
    std::array<std::vector<std::pair<int64_t, VecX>>, kNumAttrs> attr;
  };
  std::map<int, PrimEntry> prims;

  bool empty() const { return prims.empty(); }
  const VecX* find(int prim, Attr a, int64_t basisId) const;
  VecX* find(int prim, Attr a, int64_t basisId);
  double squaredNorm() const;
  double maxAbs() const;
};

struct CanonicalMap {
  std::vector<GaussianPrimitive> primitives;
  std::vector<BasisSet> bases;                // index-aligned with primitives
  std::vector<std::vector<int>> neighbors;    // symmetric kNN over canonical means
  int64_t nextBasisId = 1;

  size_t size() const { return primitives.size(); }
  int64_t allocateBasisId() { return nextBasisId++; }
};

/// Sum over (omega_k + delta_k) * phi_k(t); residuals may be null.
VecX attributeOffset(const BasisSet& bs, Attr a, double t, const ResidualSet* residuals, int primIndex);

/// Sum of phi over all bases (frozen included) of one attribute.
double temporalCoverage(const BasisSet& bs, Attr a, double t);

/// k-nearest-neighbor graph over canonical means, symmetricized.
void buildNeighborGraph(CanonicalMap& map, int k);

enum class GateMode { Learned, ForceRigid, ForceDeformable };

struct DeformOptions {
  double t = 0.0;
  const ResidualSet* residuals = nullptr;    // delta-omega at t
  GateMode gate = GateMode::Learned;
  bool wantDisplacement = false;             // fill disp = mean(t) - mean(t0)
  double t0 = 0.0;
  const ResidualSet* residualsT0 = nullptr;  // delta-omega at t0 (held constant)
};

struct DeformedGaussian {
  Vec3 mean;
  Vec3 logScale;
  Quat rot;        // unit
  double opacity;  // [0,1]
  Vec3 rgb;
  double wd;       // gate value actually applied
  Vec3 disp;       // mean(t) - mean(t0), zero unless requested
};

struct DeformContext {
  DeformOptions opts;
  struct Prim {
    double wd = 0.0;
    double dwdDlogit = 0.0;
    std::array<VecX, kNumAttrs> delta;
    Vec3 deltaMeanT0 = Vec3::Zero();
    Vec4 qRaw = Vec4::Zero();
    double qRawNorm = 1.0;
    std::array<std::vector<double>, kNumAttrs> phiT;
    std::vector<double> phiT0Mean;
  };
  std::vector<Prim> prims;
};

struct DeformedState {
  std::vector<DeformedGaussian> gaussians;
  DeformContext ctx;
};

/// Evaluates A(t) = A_c + w_d * DeltaA(t) per attribute, renormalizing the
/// rotation. A zero gate or an exactly-zero offset returns the canonical
/// attribute bit-for-bit.
DeformedState deformMap(const CanonicalMap& map, const DeformOptions& opts);

/// Per-primitive gradients w.r.t. the renderer-facing deformed attributes.
struct PrimGrad {
  Vec3 mean = Vec3::Zero();
  Vec3 logScale = Vec3::Zero();
  Vec4 rot = Vec4::Zero();
  double opacity = 0.0;
  Vec3 rgb = Vec3::Zero();
  double wd = 0.0;
  Vec3 disp = Vec3::Zero();
};

/// Gradients w.r.t. canonical attributes, logits, basis weights and active
/// per-frame residuals. Frozen bases accumulate nothing.
struct MapGradients {
  std::vector<Vec3> mean, logScale, rgb;
  std::vector<Vec4> rot;
  std::vector<double> opacityLogit, defLogit;
  std::vector<std::array<std::vector<VecX>, kNumAttrs>> basisWeight;
  ResidualSet residual;  // same key structure as the active residual set

  void resizeFor(const CanonicalMap& map);
  void setZero();
};

/// Adjoint of deformMap. `residualLayout` selects which delta-omega entries
/// receive gradients (typically the set being optimized); pass null to skip.
void deformBackward(const CanonicalMap& map, const DeformContext& ctx, const std::vector<PrimGrad>& primGrads,
                    const ResidualSet* residualLayout, MapGradients& out);

/// FNV-1a over every parameter byte; detects any mutation in tests.
uint64_t mapChecksum(const CanonicalMap& map);

int totalBasisCount(const CanonicalMap& map, bool activeOnly);

}  // namespace nrgs
