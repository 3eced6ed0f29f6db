#include "nrgs/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nrgs {

void Intrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("Intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("Intrinsics: image size must be positive");
  if (cx < 0 || cx >= width) throw std::invalid_argument("Intrinsics: cx out of [0, width)");
  if (cy < 0 || cy >= height) throw std::invalid_argument("Intrinsics: cy out of [0, height)");
}

Intrinsics Intrinsics::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("Intrinsics: cannot open " + path);
  Intrinsics k;
  in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height;
  if (!in) throw std::runtime_error("Intrinsics: malformed file " + path);
  k.validate();
  return k;
}

void Intrinsics::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("Intrinsics: cannot write " + path);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %d %d\n", fx, fy, cx, cy, width, height);
  out << buf;
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

Mat3 so3Exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(omega);
  const Vec3 axis = omega / theta;
  return Eigen::AngleAxisd(theta, axis).toRotationMatrix();
}

Vec3 so3Log(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

Mat3 so3LeftJacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 w = skew(omega);
  double c1, c2;
  if (theta < 1e-5) {
    c1 = 0.5 - theta2 / 24.0;
    c2 = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    c1 = (1.0 - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + c1 * w + c2 * w * w;
}

Mat3 so3LeftJacobianInverse(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 w = skew(omega);
  double c;
  if (theta < 1e-5) {
    c = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() - 0.5 * w + c * w * w;
}

Pose se3Exp(const Twist& xi) {
  const double theta = xi.rot.norm();
  Quat q;
  if (theta < 1e-12) {
    q = Quat(1.0, 0.5 * xi.rot.x(), 0.5 * xi.rot.y(), 0.5 * xi.rot.z());
    q.normalize();
  } else {
    q = Quat(Eigen::AngleAxisd(theta, xi.rot / theta));
  }
  return Pose(q, so3LeftJacobian(xi.rot) * xi.trans);
}

Twist se3Log(const Pose& T) {
  const Quat& q = T.rotation();
  const double sinHalf = q.vec().norm();
  const double cosHalf = q.w();
  Vec3 omega;
  if (sinHalf < 1e-12) {
    omega = 2.0 * q.vec() * (cosHalf >= 0 ? 1.0 : -1.0);
  } else {
    double angle = 2.0 * std::atan2(sinHalf, cosHalf);
    if (angle > M_PI) angle -= 2.0 * M_PI;
    omega = (angle / sinHalf) * q.vec();
  }
  return Twist{omega, so3LeftJacobianInverse(omega) * T.translation()};
}

Vec2 project(const Intrinsics& K, const Pose& camToWorld, const Vec3& pointWorld) {
  const Vec3 p = camToWorld.inverse() * pointWorld;
  if (p.z() <= 1e-6) throw std::domain_error("BehindCamera: camera-frame z <= 1e-6");
  return Vec2(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
}

Vec3 backproject(const Intrinsics& K, const Vec2& u, double d, const Pose& camToWorld) {
  if (d <= 0) throw std::domain_error("NonPositiveDepth: depth must be > 0");
  const Vec3 p((u.x() - K.cx) / K.fx * d, (u.y() - K.cy) / K.fy * d, d);
  return camToWorld * p;
}

}  // namespace nrgs
