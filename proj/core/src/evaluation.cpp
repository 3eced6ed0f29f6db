#include "nrgs/evaluation.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nrgs/objectives.hpp"

namespace nrgs {

TrajectoryMetrics ate(const std::vector<Pose>& estimated, const std::vector<Pose>& groundTruth, AteAlignment mode) {
  if (estimated.size() != groundTruth.size())
    throw std::invalid_argument("LengthMismatch: trajectory lengths differ");
  const int n = static_cast<int>(estimated.size());
  if (n < 2) throw std::invalid_argument("LengthMismatch: need at least 2 poses");

  Eigen::Matrix3Xd X(3, n), Y(3, n);
  for (int i = 0; i < n; ++i) {
    X.col(i) = estimated[i].translation();
    Y.col(i) = groundTruth[i].translation();
  }
  const Vec3 mx = X.rowwise().mean(), my = Y.rowwise().mean();
  const Eigen::Matrix3Xd Xc = X.colwise() - mx, Yc = Y.colwise() - my;

  const Mat3 cov = (Yc * Xc.transpose()) / n;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) S(2, 2) = -1;
  const Mat3 R = svd.matrixU() * S * svd.matrixV().transpose();

  double scale = 1.0;
  if (mode == AteAlignment::Similarity) {
    const double varX = Xc.squaredNorm() / n;
    scale = (svd.singularValues().asDiagonal() * S).trace() / varX;
  }
  const Vec3 t = my - scale * R * mx;

  TrajectoryMetrics m;
  m.alignment = mode;
  m.perFrameError.resize(n);
  double sum2 = 0, sum = 0;
  for (int i = 0; i < n; ++i) {
    const double r = (Y.col(i) - (scale * R * X.col(i) + t)).norm();
    m.perFrameError[i] = r;
    sum2 += r * r;
    sum += r;
  }
  m.rmse = std::sqrt(sum2 / n);
  const double mean = sum / n;
  m.sd = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
  return m;
}

double psnr(const Image& a, const Image& b) {
  if (!a.sameShape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) { return ssimMean(a, b); }

Image plotSeries(const std::vector<double>& values, int width, int height) {
  Image img(width, height, 3, 1.0);
  auto put = [&](int x, int y, double r, double g, double b) {
    if (x < 0 || x >= width || y < 0 || y >= height) return;
    img.at(x, y, 0) = r;
    img.at(x, y, 1) = g;
    img.at(x, y, 2) = b;
  };
  for (int x = 0; x < width; ++x) {
    put(x, 0, 0.6, 0.6, 0.6);
    put(x, height - 1, 0.6, 0.6, 0.6);
  }
  for (int y = 0; y < height; ++y) {
    put(0, y, 0.6, 0.6, 0.6);
    put(width - 1, y, 0.6, 0.6, 0.6);
  }
  if (values.empty()) return img;

  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const int mTop = 8, mBot = 8, mL = 8, mR = 8;
  auto toY = [&](double v) {
    return mTop + static_cast<int>((1.0 - (v - lo) / (hi - lo)) * (height - mTop - mBot - 1));
  };
  auto toX = [&](size_t i) {
    return values.size() == 1
               ? width / 2
               : mL + static_cast<int>(static_cast<double>(i) / (values.size() - 1) * (width - mL - mR - 1));
  };
  for (size_t i = 0; i + 1 < values.size(); ++i) {
    int x0 = toX(i), y0 = toY(values[i]);
    int x1 = toX(i + 1), y1 = toY(values[i + 1]);
    const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
    for (int s = 0; s <= steps; ++s) {
      const double f = static_cast<double>(s) / steps;
      put(static_cast<int>(std::lround(x0 + f * (x1 - x0))), static_cast<int>(std::lround(y0 + f * (y1 - y0))),
          0.1, 0.2, 0.8);
    }
  }
  return img;
}

}  // namespace nrgs
