#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>

namespace semslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Pinhole camera intrinsics. Pixel (0,0) is the center of the top-left
/// pixel; rays pass through pixel centers.
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("Intrinsics: focal lengths must be positive");
    if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height))
      throw std::invalid_argument("Intrinsics: principal point outside image");
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Rodrigues rotation from an axis-angle vector, with a series expansion
/// near zero so exp(0) is exactly the identity.
inline Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = skew(w);
  double a, b;  // R = I + a*W + b*W^2
  if (theta2 < 1e-16) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * W + b * W * W;
}

/// Axis-angle of a rotation matrix; angle in [0, pi].
inline Vec3 so3_log(const Mat3& R) {
  const double tr = std::min(3.0, std::max(-1.0, R.trace()));
  const double cos_theta = std::min(1.0, std::max(-1.0, (tr - 1.0) * 0.5));
  const double theta = std::acos(cos_theta);
  Vec3 axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < 1e-10) return 0.5 * axis;  // first-order
  if (theta > M_PI - 1e-6) {
    // Near pi the off-diagonal difference vanishes; recover the axis from
    // the symmetric part instead.
    Vec3 d = ((R + Mat3::Identity()) * 0.5).diagonal();
    int k;
    d.maxCoeff(&k);
    Vec3 ax = Vec3::Zero();
    ax[k] = std::sqrt(std::max(0.0, d[k]));
    ax[(k + 1) % 3] = (R(k, (k + 1) % 3) + R((k + 1) % 3, k)) / (4.0 * ax[k]);
    ax[(k + 2) % 3] = (R(k, (k + 2) % 3) + R((k + 2) % 3, k)) / (4.0 * ax[k]);
    ax.normalize();
    if (axis.dot(ax) < 0) ax = -ax;
    return theta * ax;
  }
  return (theta / (2.0 * std::sin(theta))) * axis;
}

/// Left Jacobian of SO(3): R(w + dw) ~= exp([Jl(w) dw]x) R(w).
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = skew(w);
  double a, b;  // Jl = I + a*W + b*W^2
  if (theta2 < 1e-16) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * W + b * W * W;
}

/// Jacobian of exp([w]x) * p with respect to w.
inline Mat3 so3_rotate_jacobian(const Vec3& w, const Vec3& rotated_p) {
  return -skew(rotated_p) * so3_left_jacobian(w);
}

/// SE(3) camera-to-world transform stored as unit quaternion + translation.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose inverse() const {
    Pose out;
    out.rotation = rotation.conjugate();
    out.translation = -(out.rotation * translation);
    return out;
  }

  void renormalize() { rotation.normalize(); }
};

inline Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.rotation.normalize();
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline Vec3 transform_point(const Pose& pose, const Vec3& p) { return pose.apply(p); }

/// Local pose increment: twist[0..2] axis-angle rotation (rad),
/// twist[3..5] translation (m). Applied as a left multiplication.
struct PoseDelta {
  Vec6 twist = Vec6::Zero();

  Vec3 rot() const { return twist.head<3>(); }
  Vec3 trans() const { return twist.tail<3>(); }

  Pose exp() const {
    Pose out;
    out.rotation = Eigen::Quaterniond(so3_exp(rot()));
    out.rotation.normalize();
    out.translation = trans();
    return out;
  }

  static PoseDelta log(const Pose& pose) {
    PoseDelta d;
    d.twist.head<3>() = so3_log(pose.rotation_matrix());
    d.twist.tail<3>() = pose.translation;
    return d;
  }
};

/// exp(delta) o pose, renormalized. This is the update used by every pose
/// optimizer in the pipeline.
inline Pose apply_delta(const Pose& pose, const PoseDelta& delta) {
  Pose out = compose(delta.exp(), pose);
  out.renormalize();
  return out;
}

inline Vec2 project(const Vec3& point_cam, const Intrinsics& K) {
  if (!(point_cam.z() > 0)) throw std::domain_error("project: point behind camera");
  return Vec2(K.fx * point_cam.x() / point_cam.z() + K.cx, K.fy * point_cam.y() / point_cam.z() + K.cy);
}

inline Vec3 backproject(const Vec2& pixel, double depth, const Intrinsics& K) {
  if (!(depth > 0)) throw std::domain_error("backproject: non-positive depth");
  return Vec3((pixel.x() - K.cx) / K.fx * depth, (pixel.y() - K.cy) / K.fy * depth, depth);
}

/// Camera-frame ray direction through a pixel center, z component 1, so a
/// sample at parameter d has z-depth d along the optical axis.
inline Vec3 pixel_ray_dir(const Vec2& pixel, const Intrinsics& K) {
  return Vec3((pixel.x() - K.cx) / K.fx, (pixel.y() - K.cy) / K.fy, 1.0);
}

/// Extrapolates the next pose assuming the last relative motion repeats:
/// (prev o prev2^-1) o prev.
inline Pose constant_speed_guess(const Pose& pose_prev, const Pose& pose_prev2) {
  return compose(compose(pose_prev, pose_prev2.inverse()), pose_prev);
}

}  // namespace semslam
