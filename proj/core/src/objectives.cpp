#include "nrgs/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nrgs {

double annealWeight(int k, const AnnealSchedule& s) {
  if (k < 0) throw std::invalid_argument("annealWeight: k >= 0 required");
  return s.lambda0 * std::exp(-static_cast<double>(k) / s.tau) + s.lambdaMin;
}

double huberRho(double r, double delta) {
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

double huberRhoPrime(double r, double delta) { return std::min(r, delta); }

double irlsWeight(double r, double huberDelta, double eps) {
  return huberRhoPrime(r, huberDelta) / (r + eps);
}

double huberThresholdFromResiduals(std::vector<double> residuals, double scale) {
  if (residuals.empty()) return 0.0;
  const size_t mid = residuals.size() / 2;
  std::nth_element(residuals.begin(), residuals.begin() + mid, residuals.end());
  double med = residuals[mid];
  if (residuals.size() % 2 == 0) {
    double lo = *std::max_element(residuals.begin(), residuals.begin() + mid);
    med = 0.5 * (med + lo);
  }
  return scale * med;
}

double photometricL2(const Image& rendered, const Image& observed, const MaskImage& valid, const MaskImage& covis,
                     const Image* pixelWeight, Image* grad) {
  if (!rendered.sameShape(observed)) throw std::invalid_argument("photometricL2: shape mismatch");
  const int W = rendered.width(), H = rendered.height(), C = rendered.channels();
  const double invN = 1.0 / (static_cast<double>(W) * H);
  if (grad) *grad = Image(W, H, C);
  double loss = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!valid.at(x, y) || !covis.at(x, y)) continue;
      const double w = pixelWeight ? pixelWeight->at(x, y) : 1.0;
      if (w == 0.0) continue;
      for (int c = 0; c < C; ++c) {
        const double e = rendered.at(x, y, c) - observed.at(x, y, c);
        loss += w * e * e;
        if (grad) grad->at(x, y, c) = 2.0 * w * e * invN;
      }
    }
  return loss * invN;
}

// ---------------------------------------------------------------------------
// SSIM with border-renormalized separable Gaussian window.

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, 11>& ssimKernel() {
  static const std::array<double, 11> k = [] {
    std::array<double, 11> v{};
    double s = 0;
    for (int i = 0; i < 11; ++i) {
      v[i] = std::exp(-0.5 * (i - kSsimRadius) * (i - kSsimRadius) / (kSsimSigma * kSsimSigma));
      s += v[i];
    }
    for (double& x : v) x /= s;
    return v;
  }();
  return k;
}

// zero-padded separable convolution; norm=true renormalizes by in-bounds mass
Image conv2(const Image& in, bool norm) {
  const auto& k = ssimKernel();
  const int W = in.width(), H = in.height(), C = in.channels();
  Image tmp(W, H, C), out(W, H, C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double mass = 0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int xx = x + d;
        if (xx < 0 || xx >= W) continue;
        const double kv = k[d + kSsimRadius];
        mass += kv;
        for (int c = 0; c < C; ++c) tmp.at(x, y, c) += kv * in.at(xx, y, c);
      }
      if (norm && mass > 0)
        for (int c = 0; c < C; ++c) tmp.at(x, y, c) /= mass;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double mass = 0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int yy = y + d;
        if (yy < 0 || yy >= H) continue;
        const double kv = k[d + kSsimRadius];
        mass += kv;
        for (int c = 0; c < C; ++c) out.at(x, y, c) += kv * tmp.at(x, yy, c);
      }
      if (norm && mass > 0)
        for (int c = 0; c < C; ++c) out.at(x, y, c) /= mass;
    }
  return out;
}

Image mul(const Image& a, const Image& b) {
  Image o(a.width(), a.height(), a.channels());
  for (size_t i = 0; i < o.size(); ++i) o.data()[i] = a.data()[i] * b.data()[i];
  return o;
}

// per-pixel SSIM map plus the moment images needed by the adjoint
struct SsimMoments {
  Image mx, my, x2m, y2m, xym, s;
};

SsimMoments ssimForward(const Image& a, const Image& b) {
  SsimMoments m;
  m.mx = conv2(a, true);
  m.my = conv2(b, true);
  m.x2m = conv2(mul(a, a), true);
  m.y2m = conv2(mul(b, b), true);
  m.xym = conv2(mul(a, b), true);
  m.s = Image(a.width(), a.height(), a.channels());
  for (size_t i = 0; i < m.s.size(); ++i) {
    const double mx = m.mx.data()[i], my = m.my.data()[i];
    const double sx = m.x2m.data()[i] - mx * mx;
    const double sy = m.y2m.data()[i] - my * my;
    const double sxy = m.xym.data()[i] - mx * my;
    const double A = 2 * mx * my + kC1, B = 2 * sxy + kC2;
    const double Cc = mx * mx + my * my + kC1, D = sx + sy + kC2;
    m.s.data()[i] = (A * B) / (Cc * D);
  }
  return m;
}

// adjoint of conv2(norm=true): plain zero-padded conv of g / den
Image conv2Adjoint(const Image& g) {
  const int W = g.width(), H = g.height(), C = g.channels();
  Image den(W, H, 1, 1.0);
  den = conv2(den, false);  // in-bounds kernel mass per pixel
  Image gn(W, H, C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) gn.at(x, y, c) = g.at(x, y, c) / den.at(x, y);
  return conv2(gn, false);
}

}  // namespace

double ssimMean(const Image& a, const Image& b) {
  if (!a.sameShape(b)) throw std::invalid_argument("ssim: shape mismatch");
  const SsimMoments m = ssimForward(a, b);
  double s = 0;
  for (size_t i = 0; i < m.s.size(); ++i) s += m.s.data()[i];
  return s / static_cast<double>(m.s.size());
}

double photometricSsimMix(const Image& rendered, const Image& observed, double lambda, Image* grad) {
  if (!rendered.sameShape(observed)) throw std::invalid_argument("photometricSsimMix: shape mismatch");
  if (lambda < 0 || lambda > 1) throw std::invalid_argument("photometricSsimMix: lambda in [0,1]");
  const size_t N = rendered.size();

  double l1 = 0;
  for (size_t i = 0; i < N; ++i) l1 += std::abs(rendered.data()[i] - observed.data()[i]);
  l1 /= static_cast<double>(N);

  const SsimMoments m = ssimForward(rendered, observed);
  double sMean = 0;
  for (size_t i = 0; i < N; ++i) sMean += m.s.data()[i];
  sMean /= static_cast<double>(N);

  const double loss = lambda * l1 + (1.0 - lambda) * (1.0 - sMean);
  if (!grad) return loss;

  const int W = rendered.width(), H = rendered.height(), C = rendered.channels();
  Image gMx(W, H, C), gX2(W, H, C), gXY(W, H, C);
  const double dLds = -(1.0 - lambda) / static_cast<double>(N);
  for (size_t i = 0; i < N; ++i) {
    const double mx = m.mx.data()[i], my = m.my.data()[i];
    const double sx = m.x2m.data()[i] - mx * mx;
    const double sy = m.y2m.data()[i] - my * my;
    const double sxy = m.xym.data()[i] - mx * my;
    const double A = 2 * mx * my + kC1, B = 2 * sxy + kC2;
    const double Cc = mx * mx + my * my + kC1, D = sx + sy + kC2;
    const double CD = Cc * D;
    const double dsdA = B / CD, dsdB = A / CD;
    const double dsdC = -(A * B) / (Cc * CD), dsdD = -(A * B) / (D * CD);
    const double dsdSxy = 2 * dsdB;
    const double dsdSx = dsdD;
    // mu_x feeds A, C, sigma_x^2 (-2 mu_x) and sigma_xy (-mu_y)
    const double dsdMx = 2 * my * dsdA + 2 * mx * dsdC - 2 * mx * dsdSx - my * dsdSxy;
    gMx.data()[i] = dLds * dsdMx;
    gX2.data()[i] = dLds * dsdSx;
    gXY.data()[i] = dLds * dsdSxy;
  }
  const Image aMx = conv2Adjoint(gMx);
  const Image aX2 = conv2Adjoint(gX2);
  const Image aXY = conv2Adjoint(gXY);

  *grad = Image(W, H, C);
  const double dL1 = lambda / static_cast<double>(N);
  for (size_t i = 0; i < N; ++i) {
    const double x = rendered.data()[i], yv = observed.data()[i];
    const double sgn = x > yv ? 1.0 : (x < yv ? -1.0 : 0.0);
    grad->data()[i] = dL1 * sgn + aMx.data()[i] + 2.0 * x * aX2.data()[i] + yv * aXY.data()[i];
  }
  return loss;
}

double bceLoss(double w, double wStar) {
  const double wc = std::clamp(w, 1e-6, 1.0 - 1e-6);
  const double sc = std::clamp(wStar, 1e-6, 1.0 - 1e-6);
  return -(sc * std::log(wc) + (1.0 - sc) * std::log(1.0 - wc));
}

double bceGradLogit(double w, double wStar) { return w - wStar; }

// ---------------------------------------------------------------------------

namespace {
constexpr double kNear2d = 1e-3;  // mm, matches the renderer near plane
}

Image depthResidualField(const Image& rendered, const Image& prior, const MaskImage& maskValCovis) {
  const int W = rendered.width(), H = rendered.height();
  Image r(W, H, 1, -1.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!maskValCovis.at(x, y)) continue;
      if (prior.at(x, y) <= 0) continue;
      r.at(x, y) = std::abs(rendered.at(x, y) - prior.at(x, y));
    }
  return r;
}

DepthTermResult depthTerm(const Image& rendered, const Image& prior, const MaskImage& maskValCovis,
                          const Image* pixelWeight, const Image& residualField, double huberDelta, double eps,
                          double lambda, bool wantGrad) {
  const int W = rendered.width(), H = rendered.height();
  const double invN = 1.0 / (static_cast<double>(W) * H);
  DepthTermResult out;
  if (wantGrad) out.grad = Image(W, H, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double rf = residualField.at(x, y);
      if (rf < 0) continue;
      if (!maskValCovis.at(x, y) || prior.at(x, y) <= 0) continue;
      const double w = pixelWeight ? pixelWeight->at(x, y) : 1.0;
      if (w == 0.0) continue;
      const double gamma = irlsWeight(rf, huberDelta, eps);
      const double r = rendered.at(x, y) - prior.at(x, y);
      out.loss += w * 0.5 * gamma * r * r;
      if (wantGrad) out.grad.at(x, y) = lambda * invN * w * gamma * r;
    }
  out.loss *= lambda * invN;
  return out;
}

std::vector<Vec3> predictedDisplacements(const std::vector<TrackPoint>& pts,
                                         const std::vector<DeformedGaussian>& prims) {
  std::vector<Vec3> pred(pts.size(), Vec3::Zero());
  for (size_t i = 0; i < pts.size(); ++i)
    for (const auto& [prim, a] : pts[i].blend) pred[i] += a * prims[prim].disp;
  return pred;
}

void trackResiduals(const std::vector<TrackPoint>& pts, const std::vector<Vec3>& predDisp, const Intrinsics& K,
                    const Pose& camFromWorld, std::vector<double>& r2d, std::vector<double>& r3d) {
  r2d.assign(pts.size(), -1.0);
  r3d.assign(pts.size(), -1.0);
  for (size_t i = 0; i < pts.size(); ++i) {
    if (!pts[i].masked) continue;
    const Mat3 seedRot = pts[i].seedCamToWorld.rotationMatrix().transpose();
    const Vec3 obsDisp = pts[i].xt - pts[i].x0;  // seed-camera frame
    r3d[i] = (seedRot * predDisp[i] - obsDisp).norm();
    const Vec3 xt = pts[i].seedCamToWorld * pts[i].x0 + predDisp[i];
    const Vec3 p = camFromWorld * xt;
    if (p.z() <= kNear2d) continue;
    const Vec2 u(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
    r2d[i] = (u - pts[i].ut).norm();
  }
}

TrackTermResult trackTerms(const std::vector<TrackPoint>& pts, const std::vector<Vec3>& predDisp,
                           const std::vector<DeformedGaussian>& prims, const Intrinsics& K, const Pose& camFromWorld,
                           const std::vector<double>& gamma2d, const std::vector<double>& gamma3d, double lambda2d,
                           double lambda3d, bool wantGrad) {
  TrackTermResult out;
  if (wantGrad) out.dispGrad.assign(prims.size(), Vec3::Zero());
  if (pts.empty()) return out;
  const double invN = 1.0 / static_cast<double>(pts.size());
  const Mat3 R = camFromWorld.rotationMatrix();

  for (size_t i = 0; i < pts.size(); ++i) {
    if (!pts[i].masked) continue;
    const double w = pts[i].pixelWeight;
    if (w == 0.0) continue;
    Vec3 gPred = Vec3::Zero();

    const Mat3 seedRot = pts[i].seedCamToWorld.rotationMatrix().transpose();
    const Vec3 err3 = seedRot * predDisp[i] - (pts[i].xt - pts[i].x0);
    out.loss3d += lambda3d * invN * w * 0.5 * gamma3d[i] * err3.squaredNorm();
    if (wantGrad) gPred += seedRot.transpose() * (lambda3d * invN * w * gamma3d[i] * err3);

    const Vec3 xt = pts[i].seedCamToWorld * pts[i].x0 + predDisp[i];
    const Vec3 p = camFromWorld * xt;
    if (p.z() > kNear2d) {
      const double z = p.z(), z2 = z * z;
      const Vec2 u(K.fx * p.x() / z + K.cx, K.fy * p.y() / z + K.cy);
      const Vec2 err2 = u - pts[i].ut;
      out.loss2d += lambda2d * invN * w * 0.5 * gamma2d[i] * err2.squaredNorm();
      if (wantGrad) {
        const Vec2 gU = lambda2d * invN * w * gamma2d[i] * err2;
        Eigen::Matrix<double, 2, 3> J;
        J << K.fx / z, 0, -K.fx * p.x() / z2, 0, K.fy / z, -K.fy * p.y() / z2;
        const Vec3 gP = J.transpose() * gU;
        gPred += R.transpose() * gP;
        out.poseGrad.trans += gP;
        out.poseGrad.rot += p.cross(gP);  // gP . (e_k x p) = (p x gP)_k
      }
    }

    if (wantGrad)
      for (const auto& [prim, a] : pts[i].blend) out.dispGrad[prim] += a * gPred;
  }
  return out;
}

// ---------------------------------------------------------------------------

double wdTemporalLoss(const CanonicalMap& map, const std::vector<double>& previousWd, double lambda,
                      std::vector<double>* gradDefLogit) {
  double loss = 0;
  for (size_t i = 0; i < map.size(); ++i) {
    const double w = map.primitives[i].deformationProbability();
    const double d = w - previousWd[i];
    loss += d * d;
    if (gradDefLogit) (*gradDefLogit)[i] += lambda * 2.0 * d * w * (1.0 - w);
  }
  return lambda * loss;
}

double wdSpatialLoss(const CanonicalMap& map, double lambda, std::vector<double>* gradDefLogit) {
  double loss = 0;
  for (size_t i = 0; i < map.size(); ++i) {
    const double wi = map.primitives[i].deformationProbability();
    for (int j : map.neighbors[i]) {
      const double wj = map.primitives[j].deformationProbability();
      const double d = wi - wj;
      loss += d * d;
      if (gradDefLogit) {
        (*gradDefLogit)[i] += lambda * 2.0 * d * wi * (1.0 - wi);
        (*gradDefLogit)[j] -= lambda * 2.0 * d * wj * (1.0 - wj);
      }
    }
  }
  return lambda * loss;
}

double residualRegularizer(const ResidualSet& d, const ResidualSet* dPrev, double lambdaReg, double lambdaTem,
                           ResidualSet* gradOut) {
  double loss = 0;
  for (const auto& [prim, entry] : d.prims) {
    for (int a = 0; a < kNumAttrs; ++a) {
      for (const auto& [id, v] : entry.attr[a]) {
        loss += lambdaReg * v.squaredNorm();
        VecX g = 2.0 * lambdaReg * v;
        if (dPrev) {
          const VecX* pv = dPrev->find(prim, static_cast<Attr>(a), id);
          const VecX diff = pv ? VecX(v - *pv) : v;
          loss += lambdaTem * diff.squaredNorm();
          g += 2.0 * lambdaTem * diff;
        }
        if (gradOut) {
          VecX* slot = gradOut->find(prim, static_cast<Attr>(a), id);
          if (slot)
            *slot += g;
          else
            gradOut->prims[prim].attr[a].emplace_back(id, g);
        }
      }
    }
  }
  return loss;
}

}  // namespace nrgs
