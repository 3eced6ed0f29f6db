#pragma once

#include <cmath>
#include <vector>

namespace nrgs {

/// Per-parameter adaptive first-order optimizer (Adam). The step size is
/// supplied per call so heterogeneous parameter groups can share one state
/// vector with per-slice learning rates.
class Adam {
 public:
  explicit Adam(size_t n = 0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void resize(size_t n) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
    t_ = 0;
  }

  /// Clears the moment estimates (used at learning-rate schedule boundaries).
  void reset() { resize(m_.size()); }
  size_t size() const { return m_.size(); }

  void beginStep() { ++t_; }

  /// Returns the update to subtract from parameter i.
  double step(size_t i, double grad, double lr) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad * grad;
    const double mHat = m_[i] / (1.0 - std::pow(b1_, t_));
    const double vHat = v_[i] / (1.0 - std::pow(b2_, t_));
    return lr * mHat / (std::sqrt(vHat) + eps_);
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace nrgs
