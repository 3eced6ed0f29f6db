// Dense row-major image buffers. Values are doubles in whatever unit the
// channel carries (RGB in [0,1], depth in mm, ...).
#pragma once

#include <cstdint>
#include <vector>

namespace nrgs {

class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0)
      : w_(width), h_(height), c_(channels), v_(static_cast<size_t>(width) * height * channels, fill) {}

  int width() const { return w_; }
  int height() const { return h_; }
  int channels() const { return c_; }
  bool empty() const { return v_.empty(); }
  size_t size() const { return v_.size(); }

  double& at(int x, int y, int ch = 0) { return v_[(static_cast<size_t>(y) * w_ + x) * c_ + ch]; }
  double at(int x, int y, int ch = 0) const { return v_[(static_cast<size_t>(y) * w_ + x) * c_ + ch]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  bool sameShape(const Image& o) const { return w_ == o.w_ && h_ == o.h_ && c_ == o.c_; }

  void fill(double value) { v_.assign(v_.size(), value); }

  /// Reshapes in place, reusing the existing buffer capacity.
  void reset(int width, int height, int channels, double fill = 0.0) {
    w_ = width;
    h_ = height;
    c_ = channels;
    v_.assign(static_cast<size_t>(width) * height * channels, fill);
  }

 private:
  int w_ = 0, h_ = 0, c_ = 0;
  std::vector<double> v_;
};

class MaskImage {
 public:
  MaskImage() = default;
  MaskImage(int width, int height, bool fill = false)
      : w_(width), h_(height), v_(static_cast<size_t>(width) * height, fill ? 1 : 0) {}

  int width() const { return w_; }
  int height() const { return h_; }

  bool at(int x, int y) const { return v_[static_cast<size_t>(y) * w_ + x] != 0; }
  void set(int x, int y, bool value) { v_[static_cast<size_t>(y) * w_ + x] = value ? 1 : 0; }

  size_t countTrue() const {
    size_t n = 0;
    for (uint8_t b : v_) n += b;
    return n;
  }
  bool sameShape(const MaskImage& o) const { return w_ == o.w_ && h_ == o.h_; }

 private:
  int w_ = 0, h_ = 0;
  std::vector<uint8_t> v_;
};

/// ITU-R 601 luma: 0.299 R + 0.587 G + 0.114 B. Pass-through for 1-channel input.
Image toGrayscale(const Image& rgb);

/// Pointwise AND; shapes must match.
MaskImage maskAnd(const MaskImage& a, const MaskImage& b);

}  // namespace nrgs
