// Rigid-body poses, pinhole camera model and the SE(3) machinery used by the
// gradient-based pose optimizers. World units are millimeters throughout.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <string>

namespace nrgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using VecX = Eigen::VectorXd;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

/// Local pose perturbation. Rotational part in radians, translational part in
/// millimeters; se3Exp(Twist{}) is the identity pose.
struct Twist {
  Vec3 rot{Vec3::Zero()};
  Vec3 trans{Vec3::Zero()};

  Vec6 vector() const {
    Vec6 v;
    v << rot, trans;
    return v;
  }
  static Twist fromVector(const Vec6& v) { return Twist{v.head<3>(), v.tail<3>()}; }
  double norm() const { return vector().norm(); }
};

/// Rigid transform stored as unit quaternion + translation (mm).
class Pose {
 public:
  Pose() : q_(Quat::Identity()), t_(Vec3::Zero()) {}
  Pose(const Quat& q, const Vec3& t) : q_(q.normalized()), t_(t) {}

  static Pose identity() { return Pose(); }

  const Quat& rotation() const { return q_; }
  const Vec3& translation() const { return t_; }
  Mat3 rotationMatrix() const { return q_.toRotationMatrix(); }

  Pose inverse() const {
    const Quat qi = q_.conjugate();
    return Pose(qi, qi * (-t_));
  }

  Pose operator*(const Pose& rhs) const { return Pose(q_ * rhs.q_, q_ * rhs.t_ + t_); }
  Vec3 operator*(const Vec3& p) const { return q_ * p + t_; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = rotationMatrix();
    m.block<3, 1>(0, 3) = t_;
    return m;
  }

 private:
  Quat q_;
  Vec3 t_;
};

/// Pinhole intrinsics in pixels.
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;  // throws std::invalid_argument on out-of-range values

  static Intrinsics load(const std::string& path);
  void save(const std::string& path) const;
};

Mat3 skew(const Vec3& v);
Mat3 so3Exp(const Vec3& omega);
Vec3 so3Log(const Mat3& R);
Mat3 so3LeftJacobian(const Vec3& omega);
Mat3 so3LeftJacobianInverse(const Vec3& omega);

/// Exponential map se(3) -> SE(3). Inverse of se3Log for rotation norms < pi.
Pose se3Exp(const Twist& xi);
Twist se3Log(const Pose& T);

/// Projects a world point through a camera with pose `camToWorld` (the pose of
/// the camera expressed in the world frame). Throws std::domain_error
/// ("BehindCamera") when the camera-frame depth is <= 1e-6.
Vec2 project(const Intrinsics& K, const Pose& camToWorld, const Vec3& pointWorld);

/// Lifts pixel `u` at camera-frame depth `d` (mm) back into the world frame.
/// Throws std::domain_error ("NonPositiveDepth") when d <= 0.
Vec3 backproject(const Intrinsics& K, const Vec2& u, double d, const Pose& camToWorld);

}  // namespace nrgs
