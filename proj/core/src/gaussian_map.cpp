#include "nrgs/gaussian_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace nrgs {

const char* attrName(Attr a) {
  switch (a) {
    case Attr::Mean: return "mean";
    case Attr::Scale: return "scale";
    case Attr::Rotation: return "rot";
  }
  return "?";
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

double basisEval(double t, double tau, double sigma) {
  if (sigma <= 0) throw std::domain_error("NonPositiveExtent: basis extent must be > 0");
  const double d = (t - tau) / sigma;
  return std::exp(-0.5 * d * d);
}

void setDeformationProbability(GaussianPrimitive& g, double w) {
  if (!(w > 0.0 && w < 1.0)) throw std::domain_error("OutOfRange: deformation probability must lie in (0,1)");
  g.defLogit = logit(w);
}

const VecX* ResidualSet::find(int prim, Attr a, int64_t basisId) const {
  auto it = prims.find(prim);
  if (it == prims.end()) return nullptr;
  for (const auto& [id, v] : it->second.attr[static_cast<int>(a)])
    if (id == basisId) return &v;
  return nullptr;
}

VecX* ResidualSet::find(int prim, Attr a, int64_t basisId) {
  return const_cast<VecX*>(static_cast<const ResidualSet*>(this)->find(prim, a, basisId));
}

double ResidualSet::squaredNorm() const {
  double s = 0;
  for (const auto& [_, e] : prims)
    for (const auto& attr : e.attr)
      for (const auto& [id, v] : attr) s += v.squaredNorm();
  return s;
}

double ResidualSet::maxAbs() const {
  double s = 0;
  for (const auto& [_, e] : prims)
    for (const auto& attr : e.attr)
      for (const auto& [id, v] : attr) s = std::max(s, v.cwiseAbs().maxCoeff());
  return s;
}

VecX attributeOffset(const BasisSet& bs, Attr a, double t, const ResidualSet* residuals, int primIndex) {
  VecX delta = VecX::Zero(attrDim(a));
  for (const TemporalBasis& b : bs[a]) {
    const double phi = basisEval(t, b.center, b.extent);
    if (residuals) {
      if (const VecX* d = residuals->find(primIndex, a, b.id)) {
        delta += (b.weight + *d) * phi;
        continue;
      }
    }
    delta += b.weight * phi;
  }
  return delta;
}

double temporalCoverage(const BasisSet& bs, Attr a, double t) {
  double c = 0;
  for (const TemporalBasis& b : bs[a]) c += basisEval(t, b.center, b.extent);
  return c;
}

void buildNeighborGraph(CanonicalMap& map, int k) {
  const int n = static_cast<int>(map.size());
  map.neighbors.assign(n, {});
  if (n <= 1 || k <= 0) return;
  std::vector<std::pair<double, int>> dist;
  for (int i = 0; i < n; ++i) {
    dist.clear();
    dist.reserve(n - 1);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      dist.emplace_back((map.primitives[j].mean - map.primitives[i].mean).squaredNorm(), j);
    }
    const int kk = std::min<int>(k, static_cast<int>(dist.size()));
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    for (int m = 0; m < kk; ++m) map.neighbors[i].push_back(dist[m].second);
  }
  // symmetricize
  for (int i = 0; i < n; ++i)
    for (int j : map.neighbors[i])
      if (std::find(map.neighbors[j].begin(), map.neighbors[j].end(), i) == map.neighbors[j].end())
        map.neighbors[j].push_back(i);
  for (auto& nb : map.neighbors) std::sort(nb.begin(), nb.end());
}

namespace {

// Offset evaluation that also records per-basis phi values for the adjoint.
VecX offsetWithPhi(const BasisSet& bs, Attr a, double t, const ResidualSet* residuals, int primIndex,
                   std::vector<double>& phiOut) {
  const auto& list = bs[a];
  VecX delta = VecX::Zero(attrDim(a));
  phiOut.resize(list.size());
  for (size_t k = 0; k < list.size(); ++k) {
    const TemporalBasis& b = list[k];
    const double phi = basisEval(t, b.center, b.extent);
    phiOut[k] = phi;
    const VecX* d = residuals ? residuals->find(primIndex, a, b.id) : nullptr;
    if (d)
      delta += (b.weight + *d) * phi;
    else
      delta += b.weight * phi;
  }
  return delta;
}

}  // namespace

DeformedState deformMap(const CanonicalMap& map, const DeformOptions& opts) {
  DeformedState out;
  const int n = static_cast<int>(map.size());
  out.gaussians.resize(n);
  out.ctx.opts = opts;
  out.ctx.prims.resize(n);

  for (int i = 0; i < n; ++i) {
    const GaussianPrimitive& g = map.primitives[i];
    const BasisSet& bs = map.bases[i];
    DeformedGaussian& d = out.gaussians[i];
    DeformContext::Prim& cx = out.ctx.prims[i];

    double wd;
    switch (opts.gate) {
      case GateMode::ForceRigid: wd = 0.0; break;
      case GateMode::ForceDeformable: wd = 1.0; break;
      default: wd = sigmoid(g.defLogit); break;
    }
    cx.wd = wd;
    cx.dwdDlogit = opts.gate == GateMode::Learned ? wd * (1.0 - wd) : 0.0;

    d.opacity = g.opacity();
    d.rgb = g.rgb;
    d.wd = wd;
    d.disp = Vec3::Zero();

    if (wd == 0.0) {
      // gating off: canonical state, bit-exact
      d.mean = g.mean;
      d.logScale = g.logScale;
      d.rot = g.rot;
      for (int a = 0; a < kNumAttrs; ++a) {
        cx.delta[a] = VecX::Zero(attrDim(static_cast<Attr>(a)));
        cx.phiT[a].assign(bs.attr[a].size(), 0.0);
      }
      cx.qRaw << g.rot.w(), g.rot.x(), g.rot.y(), g.rot.z();
      cx.qRawNorm = 1.0;
      continue;
    }

    for (int a = 0; a < kNumAttrs; ++a)
      cx.delta[a] = offsetWithPhi(bs, static_cast<Attr>(a), opts.t, opts.residuals, i, cx.phiT[a]);

    d.mean = g.mean + wd * Vec3(cx.delta[0]);
    d.logScale = g.logScale + wd * Vec3(cx.delta[1]);

    const VecX& dq = cx.delta[2];
    if (dq.isZero(0.0)) {
      d.rot = g.rot;
      cx.qRaw << g.rot.w(), g.rot.x(), g.rot.y(), g.rot.z();
      cx.qRawNorm = 1.0;
    } else {
      Vec4 qraw(g.rot.w() + wd * dq[0], g.rot.x() + wd * dq[1], g.rot.y() + wd * dq[2], g.rot.z() + wd * dq[3]);
      const double nrm = qraw.norm();
      cx.qRaw = qraw;
      cx.qRawNorm = nrm;
      const Vec4 qu = qraw / nrm;
      d.rot = Quat(qu[0], qu[1], qu[2], qu[3]);
    }

    if (opts.wantDisplacement) {
      const VecX dm0 = offsetWithPhi(bs, Attr::Mean, opts.t0, opts.residualsT0, i, cx.phiT0Mean);
      cx.deltaMeanT0 = Vec3(dm0);
      d.disp = wd * (Vec3(cx.delta[0]) - cx.deltaMeanT0);
    }
  }
  return out;
}

void MapGradients::resizeFor(const CanonicalMap& map) {
  const size_t n = map.size();
  mean.assign(n, Vec3::Zero());
  logScale.assign(n, Vec3::Zero());
  rgb.assign(n, Vec3::Zero());
  rot.assign(n, Vec4::Zero());
  opacityLogit.assign(n, 0.0);
  defLogit.assign(n, 0.0);
  basisWeight.resize(n);
  for (size_t i = 0; i < n; ++i)
    for (int a = 0; a < kNumAttrs; ++a)
      basisWeight[i][a].assign(map.bases[i].attr[a].size(), VecX::Zero(attrDim(static_cast<Attr>(a))));
  residual.prims.clear();
}

void MapGradients::setZero() {
  for (auto& v : mean) v.setZero();
  for (auto& v : logScale) v.setZero();
  for (auto& v : rgb) v.setZero();
  for (auto& v : rot) v.setZero();
  std::fill(opacityLogit.begin(), opacityLogit.end(), 0.0);
  std::fill(defLogit.begin(), defLogit.end(), 0.0);
  for (auto& prim : basisWeight)
    for (auto& attr : prim)
      for (auto& w : attr) w.setZero();
  residual.prims.clear();
}

void deformBackward(const CanonicalMap& map, const DeformContext& ctx, const std::vector<PrimGrad>& primGrads,
                    const ResidualSet* residualLayout, MapGradients& out) {
  const int n = static_cast<int>(map.size());
  if (ctx.opts.gate != GateMode::Learned)
    throw std::logic_error("deformBackward: only the learned gate is differentiated");

  for (int i = 0; i < n; ++i) {
    const GaussianPrimitive& g = map.primitives[i];
    const BasisSet& bs = map.bases[i];
    const PrimGrad& pg = primGrads[i];
    const DeformContext::Prim& cx = ctx.prims[i];
    const double wd = cx.wd;

    out.rgb[i] += pg.rgb;
    out.opacityLogit[i] += pg.opacity * g.opacity() * (1.0 - g.opacity());

    double gWd = pg.wd;

    // mean channel and optional displacement share the Delta-mu(t) branch
    out.mean[i] += pg.mean;
    Vec3 gDeltaMeanT = wd * pg.mean;
    Vec3 gDeltaMeanT0 = Vec3::Zero();
    if (ctx.opts.wantDisplacement) {
      gDeltaMeanT += wd * pg.disp;
      gDeltaMeanT0 -= wd * pg.disp;
      gWd += pg.disp.dot(Vec3(cx.delta[0]) - cx.deltaMeanT0);
    }
    gWd += pg.mean.dot(Vec3(cx.delta[0]));

    out.logScale[i] += pg.logScale;
    const Vec3 gDeltaScale = wd * pg.logScale;
    gWd += pg.logScale.dot(Vec3(cx.delta[1]));

    // rotation: q_unit = q_raw / |q_raw|
    const Vec4 qu = cx.qRaw / cx.qRawNorm;
    const Vec4 gqRaw = (pg.rot - qu * qu.dot(pg.rot)) / cx.qRawNorm;
    out.rot[i] += gqRaw;
    Vec4 gDeltaRot = wd * gqRaw;
    gWd += gqRaw.dot(Vec4(cx.delta[2]));

    out.defLogit[i] += gWd * cx.dwdDlogit;

    // distribute offset gradients over basis weights and, for the t branch
    // only, the active residuals (delta-omega at t0 is held constant)
    auto scatter = [&](Attr a, const VecX& gDelta, const std::vector<double>& phi, bool toResiduals) {
      const auto& list = bs[a];
      for (size_t k = 0; k < list.size(); ++k) {
        if (phi.empty() || phi[k] == 0.0) continue;
        const VecX contrib = gDelta * phi[k];
        if (!list[k].frozen) out.basisWeight[i][static_cast<int>(a)][k] += contrib;
        if (toResiduals && residualLayout && residualLayout->find(i, a, list[k].id)) {
          auto& entry = out.residual.prims[i].attr[static_cast<int>(a)];
          auto it = std::find_if(entry.begin(), entry.end(), [&](const auto& p) { return p.first == list[k].id; });
          if (it == entry.end())
            entry.emplace_back(list[k].id, contrib);
          else
            it->second += contrib;
        }
      }
    };
    scatter(Attr::Mean, gDeltaMeanT, cx.phiT[0], true);
    scatter(Attr::Scale, gDeltaScale, cx.phiT[1], true);
    scatter(Attr::Rotation, gDeltaRot, cx.phiT[2], true);
    if (ctx.opts.wantDisplacement && !gDeltaMeanT0.isZero(0.0))
      scatter(Attr::Mean, gDeltaMeanT0, cx.phiT0Mean, false);
  }
}

uint64_t mapChecksum(const CanonicalMap& map) {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const GaussianPrimitive& g : map.primitives) {
    const double vals[14] = {g.mean.x(),     g.mean.y(),     g.mean.z(),     g.logScale.x(), g.logScale.y(),
                             g.logScale.z(), g.rot.w(),      g.rot.x(),      g.rot.y(),      g.rot.z(),
                             g.opacityLogit, g.rgb.x(),      g.rgb.y(),      g.defLogit};
    mix(vals, sizeof(vals));
    mix(&g.rgb.z(), sizeof(double));
  }
  for (const BasisSet& bs : map.bases)
    for (const auto& attr : bs.attr)
      for (const TemporalBasis& b : attr) {
        mix(&b.id, sizeof(b.id));
        mix(&b.center, sizeof(b.center));
        mix(&b.extent, sizeof(b.extent));
        mix(b.weight.data(), sizeof(double) * b.weight.size());
        const char f = b.frozen ? 1 : 0;
        mix(&f, 1);
      }
  return h;
}

int totalBasisCount(const CanonicalMap& map, bool activeOnly) {
  int c = 0;
  for (const BasisSet& bs : map.bases)
    for (const auto& attr : bs.attr)
      for (const TemporalBasis& b : attr)
        if (!activeOnly || !b.frozen) ++c;
  return c;
}

}  // namespace nrgs
