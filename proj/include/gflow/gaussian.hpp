#pragma once

// Core domain types: 3D Gaussians, pinhole cameras, projected 2D splats, and
// the EWA-style perspective projection between them. Everything here is
// header-only and templated on the scalar type; the rest of the library
// instantiates it with double.

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "gflow/error.hpp"

namespace gflow {

/// Added to both diagonal entries of every projected covariance (pixels^2).
inline constexpr double kCovarianceDilation = 0.3;
/// Default near plane (camera-frame depth, world units).
inline constexpr double kDefaultNear = 0.01;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

template <typename Scalar>
Scalar logit(Scalar p) {
  using std::log;
  return log(p / (Scalar(1) - p));
}

/// Quaternions are stored w-first: (w, x, y, z).
template <typename Scalar>
using Quat4 = Eigen::Matrix<Scalar, 4, 1>;

template <typename Scalar>
Quat4<Scalar> identity_quat() {
  return Quat4<Scalar>(Scalar(1), Scalar(0), Scalar(0), Scalar(0));
}

/// Hamilton product a * b (apply b first, then a).
template <typename Scalar>
Quat4<Scalar> quat_multiply(const Quat4<Scalar>& a, const Quat4<Scalar>& b) {
  return Quat4<Scalar>(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                       a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                       a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                       a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

/// Rotation by `angle` radians about a unit `axis`.
template <typename Scalar>
Quat4<Scalar> axis_angle_quat(const Eigen::Matrix<Scalar, 3, 1>& axis, Scalar angle) {
  using std::cos;
  using std::sin;
  const Scalar h = angle / Scalar(2);
  const Eigen::Matrix<Scalar, 3, 1> v = axis.normalized() * sin(h);
  return Quat4<Scalar>(cos(h), v[0], v[1], v[2]);
}

/// Rotation matrix of q / |q|. Throws DegenerateInput for a zero quaternion.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> quat_to_rotation(const Quat4<Scalar>& q) {
  const Scalar n = q.norm();
  if (!(n > Scalar(0))) throw DegenerateInput("quat_to_rotation: zero-norm quaternion");
  const Quat4<Scalar> u = q / n;
  const Scalar w = u[0], x = u[1], y = u[2], z = u[3];
  Eigen::Matrix<Scalar, 3, 3> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

template <typename Scalar>
struct Gaussian3 {
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

  Vec3 mean = Vec3::Zero();
  Quat4<Scalar> rotation = identity_quat<Scalar>();
  /// Log of the per-axis standard deviation.
  Vec3 log_scale = Vec3::Zero();
  /// Pre-sigmoid opacity.
  Scalar opacity_logit = Scalar(0);
  Vec3 color = Vec3::Constant(Scalar(0.5));

  Scalar opacity() const { return sigmoid(opacity_logit); }
  Vec3 scale() const { return log_scale.array().exp().matrix(); }
};

/// Index i names the same physical Gaussian at every timestep.
template <typename Scalar>
using GaussianSet3 = std::vector<Gaussian3<Scalar>>;

/// Pinhole camera; `rotation` and `translation` map world to camera frame
/// (x right, y down, z forward).
template <typename Scalar>
struct Camera3 {
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  Scalar fx = Scalar(100), fy = Scalar(100), cx = Scalar(50), cy = Scalar(50);
  int width = 100, height = 100;

  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }

  /// Camera at `center` with world-to-camera rotation `r`.
  static Camera3 at(const Vec3& center, const Mat3& r, Scalar f, int w, int h) {
    Camera3 cam;
    cam.rotation = r;
    cam.translation = -(r * center);
    cam.fx = cam.fy = f;
    cam.cx = Scalar(w) / 2;
    cam.cy = Scalar(h) / 2;
    cam.width = w;
    cam.height = h;
    return cam;
  }
};

template <typename Scalar>
void validate_camera(const Camera3<Scalar>& cam) {
  using std::abs;
  if (cam.width <= 0 || cam.height <= 0) throw ContractError("camera: width and height must be positive");
  const Eigen::Matrix<Scalar, 3, 3> e =
      cam.rotation.transpose() * cam.rotation - Eigen::Matrix<Scalar, 3, 3>::Identity();
  if (!(e.cwiseAbs().maxCoeff() < Scalar(1e-9))) throw ContractError("camera: rotation is not orthonormal");
}

/// A Gaussian after projection into one camera.
template <typename Scalar>
struct Splat2 {
  Eigen::Matrix<Scalar, 2, 1> mean2d = Eigen::Matrix<Scalar, 2, 1>::Zero();
  Eigen::Matrix<Scalar, 2, 2> cov2d = Eigen::Matrix<Scalar, 2, 2>::Identity();
  Scalar depth = Scalar(1);
  Scalar opacity = Scalar(0);
  Eigen::Matrix<Scalar, 3, 1> color = Eigen::Matrix<Scalar, 3, 1>::Zero();
};

/// R diag(exp(2 log_scale)) R^T.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> covariance3d(const Gaussian3<Scalar>& g) {
  const Eigen::Matrix<Scalar, 3, 3> r = quat_to_rotation(g.rotation);
  const Eigen::Matrix<Scalar, 3, 1> var = (Scalar(2) * g.log_scale).array().exp().matrix();
  return r * var.asDiagonal() * r.transpose();
}

/// d(pixel)/d(camera-frame point) of the pinhole map.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 3> perspective_jacobian(const Eigen::Matrix<Scalar, 3, 1>& p, const Camera3<Scalar>& cam) {
  const Scalar iz = Scalar(1) / p.z();
  Eigen::Matrix<Scalar, 2, 3> j;
  j << cam.fx * iz, Scalar(0), -cam.fx * p.x() * iz * iz,  //
      Scalar(0), cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return j;
}

template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> pinhole(const Eigen::Matrix<Scalar, 3, 1>& p, const Camera3<Scalar>& cam) {
  return Eigen::Matrix<Scalar, 2, 1>(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
}

/// First-order (EWA) projection. Returns nullopt when the mean is not beyond `near`.
template <typename Scalar>
std::optional<Splat2<Scalar>> project(const Gaussian3<Scalar>& g, const Camera3<Scalar>& cam,
                                      Scalar near = Scalar(kDefaultNear)) {
  const Eigen::Matrix<Scalar, 3, 1> p = cam.to_camera(g.mean);
  if (!(p.z() > near)) return std::nullopt;
  const Eigen::Matrix<Scalar, 2, 3> j = perspective_jacobian(p, cam);
  const Eigen::Matrix<Scalar, 2, 3> jw = j * cam.rotation;
  Splat2<Scalar> s;
  s.mean2d = pinhole(p, cam);
  s.cov2d = jw * covariance3d(g) * jw.transpose();
  s.cov2d(0, 1) = s.cov2d(1, 0) = Scalar(0.5) * (s.cov2d(0, 1) + s.cov2d(1, 0));
  s.cov2d.diagonal().array() += Scalar(kCovarianceDilation);
  s.depth = p.z();
  s.opacity = g.opacity();
  s.color = g.color;
  return s;
}

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Quat4<double>;
using Gaussian3D = Gaussian3<double>;
using GaussianSet = GaussianSet3<double>;
using Camera = Camera3<double>;
using Splat2D = Splat2<double>;

}  // namespace gflow
