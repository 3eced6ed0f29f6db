#include "nrgs/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nrgs/parallel.hpp"

namespace nrgs {

std::optional<ProjectedGaussian> projectGaussian(const DeformedGaussian& g, const Intrinsics& K,
                                                 const Pose& camFromWorld, CullReason* reason) {
  auto fail = [&](CullReason r) -> std::optional<ProjectedGaussian> {
    if (reason) *reason = r;
    return std::nullopt;
  };

  ProjectedGaussian p;
  p.pCam = camFromWorld * g.mean;
  const double z = p.pCam.z();
  if (z <= kNearPlane) return fail(CullReason::BehindCamera);

  const double x = p.pCam.x(), y = p.pCam.y();
  p.mean2d = Vec2(K.fx * x / z + K.cx, K.fy * y / z + K.cy);
  const double mx = kScreenMargin * K.width, my = kScreenMargin * K.height;
  if (p.mean2d.x() < -mx || p.mean2d.x() > K.width - 1 + mx || p.mean2d.y() < -my ||
      p.mean2d.y() > K.height - 1 + my)
    return fail(CullReason::OffScreen);

  p.J << K.fx / z, 0, -K.fx * x / (z * z), 0, K.fy / z, -K.fy * y / (z * z);
  const Mat3 W = camFromWorld.rotationMatrix();
  p.M = p.J * W;

  const Vec3 s = g.logScale.array().exp();
  const Mat3 B = g.rot.toRotationMatrix() * s.asDiagonal();
  p.cov3d = B * B.transpose();

  p.cov2d = p.M * p.cov3d * p.M.transpose();
  p.cov2d(0, 0) += kCovFloor;
  p.cov2d(1, 1) += kCovFloor;
  const double det = p.cov2d(0, 0) * p.cov2d(1, 1) - p.cov2d(0, 1) * p.cov2d(1, 0);
  p.invCov << p.cov2d(1, 1) / det, -p.cov2d(0, 1) / det, -p.cov2d(1, 0) / det, p.cov2d(0, 0) / det;

  const double mid = 0.5 * (p.cov2d(0, 0) + p.cov2d(1, 1));
  const double lamMax = mid + std::sqrt(std::max(0.0, mid * mid - det));
  // support ends where alpha crosses the skip threshold, so the bounding box
  // never truncates a contribution the blender would keep
  const double qMax = std::max(0.25, 2.0 * std::log(255.0 * std::min(1.0, g.opacity)));
  p.radius = std::sqrt(qMax * lamMax);
  p.depth = z;
  p.sourceIndex = -1;
  if (reason) *reason = CullReason::None;
  return p;
}

namespace {

// flat per-splat data touched in the blending inner loop
struct HotSplat {
  double mx, my;
  double ia, ib, ic;  // inverse 2x2 covariance (xx, xy, yy)
  double opacity;
  double qMax;  // alpha falls below the skip threshold beyond this
  double depth;
  double r, g, b;
  double wd;
  double dx, dy, dz;
  int source;
};

}  // namespace

// reused across calls from the same (orchestrator) thread so hot loops do
// not pay allocation and page-fault cost per render
struct RenderScratch {
  std::vector<int> order;
  std::vector<HotSplat> hot;
  std::vector<uint32_t> count;
  std::vector<int32_t> cand;
  std::array<std::vector<ContribEntry>, kParallelChunks> chunkContribs;
  std::array<std::vector<uint32_t>, kParallelChunks> chunkCounts;
};

void renderInto(RenderOutput& out, const std::vector<DeformedGaussian>& prims, const Intrinsics& K,
                const Pose& camFromWorld, const RenderOptions& opts) {
  K.validate();
  const int W = K.width, H = K.height;
  const int n = static_cast<int>(prims.size());

  static thread_local RenderScratch scratch;

  out.width = W;
  out.height = H;
  out.rgb.reset(W, H, 3);
  out.depth.reset(W, H, 1);
  out.transmittance.reset(W, H, 1, 1.0);
  if (opts.confidence)
    out.confidence.reset(W, H, 1);
  else
    out.confidence = Image();
  if (opts.trajectory)
    out.traj.reset(W, H, 3);
  else
    out.traj = Image();
  out.contribOffset.clear();
  out.contribs.clear();

  out.projIndex.assign(n, -1);
  out.projected.clear();
  for (int i = 0; i < n; ++i) {
    auto p = projectGaussian(prims[i], K, camFromWorld);
    if (!p) continue;
    p->sourceIndex = i;
    out.projIndex[i] = static_cast<int>(out.projected.size());
    out.projected.push_back(*p);
  }

  // splats sorted by (depth, source index) once; binning in that order makes
  // every per-pixel candidate list arrive depth-sorted
  std::vector<int>& order = scratch.order;
  order.resize(out.projected.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const ProjectedGaussian& pa = out.projected[a];
    const ProjectedGaussian& pb = out.projected[b];
    if (pa.depth != pb.depth) return pa.depth < pb.depth;
    return pa.sourceIndex < pb.sourceIndex;
  });

  std::vector<HotSplat>& hot = scratch.hot;
  hot.resize(out.projected.size());
  for (size_t s = 0; s < order.size(); ++s) {
    const ProjectedGaussian& p = out.projected[order[s]];
    const DeformedGaussian& g = prims[p.sourceIndex];
    HotSplat& h = hot[s];
    h.mx = p.mean2d.x();
    h.my = p.mean2d.y();
    h.ia = p.invCov(0, 0);
    h.ib = p.invCov(0, 1);
    h.ic = p.invCov(1, 1);
    h.opacity = g.opacity;
    h.qMax = 2.0 * std::log(255.0 * std::min(1.0, g.opacity));
    h.depth = p.depth;
    h.r = g.rgb.x();
    h.g = g.rgb.y();
    h.b = g.rgb.z();
    h.wd = g.wd;
    h.dx = g.disp.x();
    h.dy = g.disp.y();
    h.dz = g.disp.z();
    h.source = p.sourceIndex;
  }

  // bin sorted splats into per-pixel candidate lists (CSR layout)
  const size_t npix = static_cast<size_t>(W) * H;
  std::vector<uint32_t>& count = scratch.count;
  count.assign(npix + 1, 0);
  auto bbox = [&](const ProjectedGaussian& p, int& x0, int& x1, int& y0, int& y1) {
    x0 = std::max(0, static_cast<int>(std::floor(p.mean2d.x() - p.radius)));
    x1 = std::min(W - 1, static_cast<int>(std::ceil(p.mean2d.x() + p.radius)));
    y0 = std::max(0, static_cast<int>(std::floor(p.mean2d.y() - p.radius)));
    y1 = std::min(H - 1, static_cast<int>(std::ceil(p.mean2d.y() + p.radius)));
  };
  for (const ProjectedGaussian& p : out.projected) {
    int x0, x1, y0, y1;
    bbox(p, x0, x1, y0, y1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) ++count[static_cast<size_t>(y) * W + x + 1];
  }
  std::partial_sum(count.begin(), count.end(), count.begin());
  std::vector<int32_t>& cand = scratch.cand;
  cand.resize(count[npix]);
  {
    std::vector<uint32_t> cursor(count.begin(), count.end() - 1);
    for (size_t s = 0; s < order.size(); ++s) {
      const ProjectedGaussian& p = out.projected[order[s]];
      int x0, x1, y0, y1;
      bbox(p, x0, x1, y0, y1);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) cand[cursor[static_cast<size_t>(y) * W + x]++] = static_cast<int32_t>(s);
    }
  }

  // per-pixel front-to-back blending; contributor lists per chunk, stitched after
  auto& chunkContribs = scratch.chunkContribs;
  auto& chunkCounts = scratch.chunkCounts;
  for (auto& v : chunkContribs) v.clear();
  for (auto& v : chunkCounts) v.clear();

  parallelChunks(
      H,
      [&](int chunk, int rowBegin, int rowEnd) {
        auto& entries = chunkContribs[chunk];
        auto& counts = chunkCounts[chunk];
        counts.assign(static_cast<size_t>(rowEnd - rowBegin) * W, 0);
        if (opts.keepContributors)
          entries.reserve(count[static_cast<size_t>(rowEnd) * W] - count[static_cast<size_t>(rowBegin) * W]);
        for (int y = rowBegin; y < rowEnd; ++y) {
          for (int x = 0; x < W; ++x) {
            const size_t pix = static_cast<size_t>(y) * W + x;
            const uint32_t b = count[pix], e = count[pix + 1];
            if (b == e) continue;

            double T = 1.0;
            double accR = 0, accG = 0, accB = 0, accD = 0, accC = 0;
            double accTx = 0, accTy = 0, accTz = 0;
            uint32_t emitted = 0;
            for (uint32_t ci = b; ci < e; ++ci) {
              const HotSplat& h = hot[cand[ci]];
              const double dx = x - h.mx, dy = y - h.my;
              const double q = dx * (h.ia * dx + h.ib * dy) + dy * (h.ib * dx + h.ic * dy);
              if (q >= h.qMax) continue;  // alpha would fall below the skip threshold
              double alpha = h.opacity * std::exp(-0.5 * q);
              if (alpha < kAlphaSkip) continue;
              if (alpha > kAlphaClamp) alpha = kAlphaClamp;
              const double testT = T * (1.0 - alpha);
              if (testT < kTransmitStop) break;
              const double a = alpha * T;
              accR += h.r * a;
              accG += h.g * a;
              accB += h.b * a;
              accD += h.depth * a;
              if (opts.confidence) accC += h.wd * a;
              if (opts.trajectory) {
                accTx += h.dx * a;
                accTy += h.dy * a;
                accTz += h.dz * a;
              }
              if (opts.keepContributors) {
                entries.push_back({h.source, alpha, a});
                ++emitted;
              }
              T = testT;
            }
            out.rgb.at(x, y, 0) = accR;
            out.rgb.at(x, y, 1) = accG;
            out.rgb.at(x, y, 2) = accB;
            out.depth.at(x, y) = accD;
            out.transmittance.at(x, y) = T;
            if (opts.confidence) out.confidence.at(x, y) = accC;
            if (opts.trajectory) {
              out.traj.at(x, y, 0) = accTx;
              out.traj.at(x, y, 1) = accTy;
              out.traj.at(x, y, 2) = accTz;
            }
            counts[static_cast<size_t>(y - rowBegin) * W + x] = emitted;
          }
        }
      },
      opts.workers);

  if (opts.keepContributors) {
    out.contribOffset.assign(npix + 1, 0);
    const int chunkSize = (H + kParallelChunks - 1) / kParallelChunks;
    for (int chunk = 0; chunk < kParallelChunks; ++chunk) {
      const int rowBegin = chunk * chunkSize;
      if (rowBegin >= H) break;
      const auto& counts = chunkCounts[chunk];
      for (size_t i = 0; i < counts.size(); ++i)
        out.contribOffset[static_cast<size_t>(rowBegin) * W + i + 1] = counts[i];
    }
    std::partial_sum(out.contribOffset.begin(), out.contribOffset.end(), out.contribOffset.begin());
    out.contribs.resize(out.contribOffset.back());
    for (int chunk = 0; chunk < kParallelChunks; ++chunk) {
      const int rowBegin = chunk * chunkSize;
      if (rowBegin >= H) break;
      const auto& entries = chunkContribs[chunk];
      if (entries.empty()) continue;
      std::copy(entries.begin(), entries.end(),
                out.contribs.begin() + out.contribOffset[static_cast<size_t>(rowBegin) * W]);
    }
  }
}

RenderOutput render(const std::vector<DeformedGaussian>& prims, const Intrinsics& K, const Pose& camFromWorld,
                    const RenderOptions& opts) {
  RenderOutput out;
  renderInto(out, prims, K, camFromWorld, opts);
  return out;
}

namespace {

// per-chunk accumulation buffers for the backward pass
struct PrimAccum {
  std::vector<double> mean2d;  // 2 per prim
  std::vector<double> cov;     // 3 per prim (xx, xy, yy)
  std::vector<double> z;
  std::vector<double> rgb;   // 3
  std::vector<double> opac;
  std::vector<double> wd;
  std::vector<double> disp;  // 3

  void init(int n) {
    mean2d.assign(2 * n, 0.0);
    cov.assign(3 * n, 0.0);
    z.assign(n, 0.0);
    rgb.assign(3 * n, 0.0);
    opac.assign(n, 0.0);
    wd.assign(n, 0.0);
    disp.assign(3 * n, 0.0);
  }
  void add(const PrimAccum& o) {
    for (size_t i = 0; i < mean2d.size(); ++i) mean2d[i] += o.mean2d[i];
    for (size_t i = 0; i < cov.size(); ++i) cov[i] += o.cov[i];
    for (size_t i = 0; i < z.size(); ++i) z[i] += o.z[i];
    for (size_t i = 0; i < rgb.size(); ++i) rgb[i] += o.rgb[i];
    for (size_t i = 0; i < opac.size(); ++i) opac[i] += o.opac[i];
    for (size_t i = 0; i < wd.size(); ++i) wd[i] += o.wd[i];
    for (size_t i = 0; i < disp.size(); ++i) disp[i] += o.disp[i];
  }
};

}  // namespace

RenderGradients renderBackward(const std::vector<DeformedGaussian>& prims, const Intrinsics& K,
                               const Pose& camFromWorld, const RenderOutput& out, const ChannelGrads& grads,
                               int workers) {
  if (out.contribOffset.empty())
    throw std::logic_error("StaleForward: renderBackward needs contributor lists from the matching forward call");
  const int W = out.width, H = out.height;
  const int n = static_cast<int>(prims.size());

  // bound to a plain reference so the worker lambdas use the caller's
  // instance rather than their own thread_local
  static thread_local std::vector<PrimAccum> accStorage(kParallelChunks);
  std::vector<PrimAccum>& acc = accStorage;
  for (auto& a : acc) a.init(n);

  parallelChunks(
      H,
      [&](int chunk, int rowBegin, int rowEnd) {
        PrimAccum& A = acc[chunk];
        for (int y = rowBegin; y < rowEnd; ++y) {
          for (int x = 0; x < W; ++x) {
            const int cnt = out.contribCount(x, y);
            const bool hasT = grads.transmittance != nullptr;
            if (cnt == 0) continue;
            const ContribEntry* cb = out.contribBegin(x, y);

            double gC[3] = {0, 0, 0};
            double gD = 0, gT = 0, gW = 0;
            double gJ3[3] = {0, 0, 0};
            if (grads.rgb)
              for (int c = 0; c < 3; ++c) gC[c] = grads.rgb->at(x, y, c);
            if (grads.depth) gD = grads.depth->at(x, y);
            if (hasT) gT = grads.transmittance->at(x, y);
            if (grads.confidence) gW = grads.confidence->at(x, y);
            if (grads.traj)
              for (int c = 0; c < 3; ++c) gJ3[c] = grads.traj->at(x, y, c);

            const double Tfinal = out.transmittance.at(x, y);

            // suffix sums of v_k * a_k, iterated back to front
            double sR = 0, sG = 0, sB = 0, sD = 0, sC = 0;
            double sTx = 0, sTy = 0, sTz = 0;
            for (int i = cnt - 1; i >= 0; --i) {
              const ContribEntry& e = cb[i];
              const DeformedGaussian& g = prims[e.prim];
              const int pj = out.projIndex[e.prim];
              const ProjectedGaussian& p = out.projected[pj];
              const double a = e.blend;
              const double Ti = a / e.alpha;

              // channel-value gradients
              A.rgb[3 * e.prim + 0] += gC[0] * a;
              A.rgb[3 * e.prim + 1] += gC[1] * a;
              A.rgb[3 * e.prim + 2] += gC[2] * a;
              A.z[e.prim] += gD * a;
              A.wd[e.prim] += gW * a;
              A.disp[3 * e.prim + 0] += gJ3[0] * a;
              A.disp[3 * e.prim + 1] += gJ3[1] * a;
              A.disp[3 * e.prim + 2] += gJ3[2] * a;

              // alpha gradient via the telescoping blend
              const double om = 1.0 - e.alpha;
              double gAlpha = gC[0] * (Ti * g.rgb.x() - sR / om) + gC[1] * (Ti * g.rgb.y() - sG / om) +
                              gC[2] * (Ti * g.rgb.z() - sB / om) + gD * (Ti * p.depth - sD / om) +
                              gW * (Ti * g.wd - sC / om) + gJ3[0] * (Ti * g.disp.x() - sTx / om) +
                              gJ3[1] * (Ti * g.disp.y() - sTy / om) + gJ3[2] * (Ti * g.disp.z() - sTz / om);
              if (hasT) gAlpha -= gT * Tfinal / om;

              sR += g.rgb.x() * a;
              sG += g.rgb.y() * a;
              sB += g.rgb.z() * a;
              sD += p.depth * a;
              sC += g.wd * a;
              sTx += g.disp.x() * a;
              sTy += g.disp.y() * a;
              sTz += g.disp.z() * a;

              if (e.alpha >= kAlphaClamp) continue;  // clamped: no gradient through alpha

              const double G = e.alpha / g.opacity;
              A.opac[e.prim] += gAlpha * G;
              const double gG = gAlpha * g.opacity;

              const double dx = x - p.mean2d.x(), dy = y - p.mean2d.y();
              const double ldx = p.invCov(0, 0) * dx + p.invCov(0, 1) * dy;
              const double ldy = p.invCov(1, 0) * dx + p.invCov(1, 1) * dy;
              // dG/dmean2d = G * Lambda d ; dG/dSigma' = G/2 * (Lambda d)(Lambda d)^T
              A.mean2d[2 * e.prim + 0] += gG * G * ldx;
              A.mean2d[2 * e.prim + 1] += gG * G * ldy;
              const double h = 0.5 * gG * G;
              A.cov[3 * e.prim + 0] += h * ldx * ldx;
              A.cov[3 * e.prim + 1] += h * ldx * ldy * 2.0;  // symmetric off-diagonal pair
              A.cov[3 * e.prim + 2] += h * ldy * ldy;
            }
          }
        }
      },
      workers);

  for (int c = 1; c < kParallelChunks; ++c) acc[0].add(acc[c]);
  const PrimAccum& A = acc[0];

  RenderGradients rg;
  rg.prim.assign(n, PrimGrad{});
  Vec3 gRotTwist = Vec3::Zero(), gTransTwist = Vec3::Zero();

  const Mat3 Wrot = camFromWorld.rotationMatrix();
  const Vec3 tcw = camFromWorld.translation();

  for (int i = 0; i < n; ++i) {
    PrimGrad& pg = rg.prim[i];
    pg.rgb = Vec3(A.rgb[3 * i], A.rgb[3 * i + 1], A.rgb[3 * i + 2]);
    pg.opacity = A.opac[i];
    pg.wd = A.wd[i];
    pg.disp = Vec3(A.disp[3 * i], A.disp[3 * i + 1], A.disp[3 * i + 2]);

    const int pj = out.projIndex[i];
    if (pj < 0) continue;
    const ProjectedGaussian& p = out.projected[pj];

    const Vec2 gMean2d(A.mean2d[2 * i], A.mean2d[2 * i + 1]);
    Mat2 gCov;
    gCov << A.cov[3 * i], 0.5 * A.cov[3 * i + 1], 0.5 * A.cov[3 * i + 1], A.cov[3 * i + 2];
    const double gz = A.z[i];
    if (gMean2d.isZero(0.0) && gCov.isZero(0.0) && gz == 0.0) continue;

    // Sigma' = M Sigma M^T  (the +0.3 I floor is constant)
    const Eigen::Matrix<double, 2, 3> gM = 2.0 * gCov * p.M * p.cov3d;
    const Mat3 gCov3d = p.M.transpose() * gCov * p.M;

    // M = J W
    const Eigen::Matrix<double, 2, 3> gJ = gM * Wrot.transpose();
    const Mat3 gWfromCov = p.J.transpose() * gM;

    // projection point gradient: mean2d, depth channel, and J(p)
    Vec3 gp = p.J.transpose() * gMean2d;
    gp.z() += gz;
    const double x = p.pCam.x(), y = p.pCam.y(), z = p.pCam.z();
    const double z2 = z * z, z3 = z2 * z;
    gp.x() += gJ(0, 2) * (-K.fx / z2);
    gp.y() += gJ(1, 2) * (-K.fy / z2);
    gp.z() += gJ(0, 0) * (-K.fx / z2) + gJ(1, 1) * (-K.fy / z2) + gJ(0, 2) * (2.0 * K.fx * x / z3) +
              gJ(1, 2) * (2.0 * K.fy * y / z3);

    // Sigma = B B^T with B = R(q) diag(exp(logScale))
    const Vec3 s = prims[i].logScale.array().exp();
    const Mat3 R = prims[i].rot.toRotationMatrix();
    const Mat3 B = R * s.asDiagonal();
    const Mat3 gB = 2.0 * gCov3d * B;
    const Mat3 gR = gB * s.asDiagonal();
    const Vec3 gs = (R.transpose() * gB).diagonal();
    pg.logScale += gs.cwiseProduct(s);

    // dR/dq for the unit-quaternion rotation matrix
    const double qw = prims[i].rot.w(), qx = prims[i].rot.x(), qy = prims[i].rot.y(), qz = prims[i].rot.z();
    Mat3 dRdw, dRdx, dRdy, dRdz;
    dRdw << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
    dRdx << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
    dRdy << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
    dRdz << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
    pg.rot[0] += 2.0 * (gR.array() * dRdw.array()).sum();
    pg.rot[1] += 2.0 * (gR.array() * dRdx.array()).sum();
    pg.rot[2] += 2.0 * (gR.array() * dRdy.array()).sum();
    pg.rot[3] += 2.0 * (gR.array() * dRdz.array()).sum();

    // world mean and camera pose
    pg.mean += Wrot.transpose() * gp;
    const Mat3 gWtotal = gp * prims[i].mean.transpose() + gWfromCov;
    gTransTwist += gp;
    for (int k = 0; k < 3; ++k) {
      Vec3 ek = Vec3::Zero();
      ek[k] = 1.0;
      const Mat3 dW = skew(ek) * Wrot;
      gRotTwist[k] += (gWtotal.array() * dW.array()).sum() + gp.dot(ek.cross(tcw));
    }
  }

  rg.pose.rot = gRotTwist;
  rg.pose.trans = gTransTwist;
  return rg;
}

}  // namespace nrgs
