// Software differentiable rasterizer for deformed Gaussian sets. Renders RGB,
// alpha-blended depth, transmittance, deformation-confidence and 3D-trajectory
// channels with per-pixel contributor lists, and provides analytic gradients
// w.r.t. every primitive attribute and the camera pose twist.
#pragma once

#include <optional>
#include <vector>

#include "nrgs/gaussian_map.hpp"
#include "nrgs/geometry.hpp"
#include "nrgs/image.hpp"

namespace nrgs {

inline constexpr double kNearPlane = 1e-3;        // mm
inline constexpr double kCovFloor = 0.3;          // px^2 diagonal added to cov2d
inline constexpr double kAlphaClamp = 0.99;       // max per-splat opacity
inline constexpr double kAlphaSkip = 1.0 / 255.0; // contributions below are dropped
inline constexpr double kTransmitStop = 1e-4;     // front-to-back early exit
inline constexpr double kScreenMargin = 0.15;     // 1.3x screen-bounds culling

enum class CullReason { None, BehindCamera, OffScreen };

struct ProjectedGaussian {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  double depth = 0.0;  // camera-frame z, mm
  int sourceIndex = -1;

  // cached intermediates reused by rasterization and the backward pass
  Mat2 invCov = Mat2::Zero();
  double radius = 0.0;
  Vec3 pCam = Vec3::Zero();
  Eigen::Matrix<double, 2, 3> J = Eigen::Matrix<double, 2, 3>::Zero();
  Eigen::Matrix<double, 2, 3> M = Eigen::Matrix<double, 2, 3>::Zero();
  Mat3 cov3d = Mat3::Zero();
};

/// EWA projection of one deformed primitive. Returns nullopt (with the reason)
/// when the primitive is behind the near plane or outside the 1.3x screen
/// bounds margin.
std::optional<ProjectedGaussian> projectGaussian(const DeformedGaussian& g, const Intrinsics& K,
                                                 const Pose& camFromWorld, CullReason* reason = nullptr);

struct RenderOptions {
  bool rgb = true;
  bool depth = true;
  bool confidence = false;
  bool trajectory = false;     // blends per-primitive `disp`
  bool keepContributors = true;
  int workers = 0;             // 0 = hardware concurrency
};

struct ContribEntry {
  int prim;      // index into the input primitive list
  double alpha;  // clamped per-splat opacity
  double blend;  // alpha * transmittance before this splat
};

struct RenderOutput {
  Image rgb;            // HxWx3
  Image depth;          // HxW, mm
  Image transmittance;  // HxW
  Image confidence;     // HxW
  Image traj;           // HxWx3, mm

  std::vector<uint32_t> contribOffset;  // H*W + 1 prefix offsets
  std::vector<ContribEntry> contribs;

  std::vector<ProjectedGaussian> projected;  // visible primitives only
  std::vector<int> projIndex;                // per input prim -> projected index or -1

  int width = 0, height = 0;

  int contribCount(int x, int y) const {
    const size_t p = static_cast<size_t>(y) * width + x;
    return static_cast<int>(contribOffset[p + 1] - contribOffset[p]);
  }
  const ContribEntry* contribBegin(int x, int y) const {
    return contribs.data() + contribOffset[static_cast<size_t>(y) * width + x];
  }
};

/// Depth-sorted front-to-back alpha blending over all visible primitives.
/// `camFromWorld` maps world points into the camera frame.
RenderOutput render(const std::vector<DeformedGaussian>& prims, const Intrinsics& K, const Pose& camFromWorld,
                    const RenderOptions& opts = {});

/// In-place variant; reusing one RenderOutput across iterations keeps its
/// buffer capacity and avoids per-call allocation in hot loops.
void renderInto(RenderOutput& out, const std::vector<DeformedGaussian>& prims, const Intrinsics& K,
                const Pose& camFromWorld, const RenderOptions& opts = {});

/// Per-pixel upstream gradients; null channels contribute nothing.
struct ChannelGrads {
  const Image* rgb = nullptr;
  const Image* depth = nullptr;
  const Image* transmittance = nullptr;
  const Image* confidence = nullptr;
  const Image* traj = nullptr;
};

struct RenderGradients {
  std::vector<PrimGrad> prim;  // aligned with the input primitive list
  Twist pose;                  // d loss / d xi for camFromWorld <- exp(xi) * camFromWorld
};

/// Reverse-mode pass matching a prior forward call. Throws std::logic_error
/// ("StaleForward") when the output lacks contributor lists.
RenderGradients renderBackward(const std::vector<DeformedGaussian>& prims, const Intrinsics& K,
                               const Pose& camFromWorld, const RenderOutput& out, const ChannelGrads& grads,
                               int workers = 0);

}  // namespace nrgs
