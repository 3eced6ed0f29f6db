// Trajectory and rendering metrics plus simple plot emission.
#pragma once

#include <string>
#include <vector>

#include "nrgs/geometry.hpp"
#include "nrgs/image.hpp"

namespace nrgs {

enum class AteAlignment { Rigid, Similarity };

struct TrajectoryMetrics {
  double rmse = 0;  // mm
  double sd = 0;    // mm
  AteAlignment alignment = AteAlignment::Rigid;
  std::vector<double> perFrameError;  // residual norm per frame after alignment
};

/// Closed-form least-squares alignment (rigid by default, similarity behind
/// the flag) of estimated camera positions to ground truth, then RMSE and SD
/// of the residual norms. Throws std::invalid_argument ("LengthMismatch").
TrajectoryMetrics ate(const std::vector<Pose>& estimated, const std::vector<Pose>& groundTruth,
                      AteAlignment mode = AteAlignment::Rigid);

/// 10 log10(1 / MSE) for images in [0,1]; 99 dB cap when MSE < 1e-10.
double psnr(const Image& a, const Image& b);

/// Mean SSIM, 11x11 Gaussian window, sigma 1.5, L = 1.
double ssim(const Image& a, const Image& b);

/// Renders a per-frame series as a line plot (white background, gray frame).
Image plotSeries(const std::vector<double>& values, int width = 640, int height = 240);

}  // namespace nrgs
