#pragma once

// Core geometry: points, SE(3) transforms, pinhole camera, weighted rigid
// alignment. Lengths are meters throughout.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ofusion/error.hpp"

namespace ofusion {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// A position in meters.
using Point3 = Vec3;
/// A displacement between temporally adjacent frames, in meters.
using Motion3 = Vec3;

inline bool is_finite(const Vec3& v) { return v.allFinite(); }

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Rotation matrix for an axis-angle vector (Rodrigues).
inline Mat3 so3_exp(const Vec3& omega) {
  const double angle = omega.norm();
  if (angle < 1e-14) return Mat3::Identity() + skew(omega);
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

/// Projects a near-rotation back onto SO(3).
inline Mat3 orthonormalize(const Mat3& r) {
  return Eigen::Quaterniond(r).normalized().toRotationMatrix();
}

/// Element of SE(3): x -> rotation * x + translation.
class RigidTransform {
 public:
  RigidTransform() = default;
  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {}

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  /// Rotation by `angle` about the line through `center` along `axis`.
  static RigidTransform rotation_around(const Vec3& center, const Vec3& axis, double angle) {
    const Mat3 r = rotation_about(axis, angle);
    return {r, center - r * center};
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Point3 operator()(const Point3& p) const { return rotation_ * p + translation_; }

  RigidTransform inverse() const {
    const Mat3 rt = rotation_.transpose();
    return {rt, -(rt * translation_)};
  }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation_.allFinite() || !translation_.allFinite()) return false;
    const double ortho = (rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation_.determinant() - 1.0) <= tol;
  }

 private:
  Mat3 rotation_ = Mat3::Identity();
  Vec3 translation_ = Vec3::Zero();
};

/// (a ∘ b)(p) = a(b(p)).
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

// Deformation-node convention: a node transform rotates about the node's own
// position and then translates, x -> R (x - p) + p + t.

inline Point3 apply_about(const RigidTransform& t, const Point3& node, const Point3& x) {
  return t.rotation() * (x - node) + node + t.translation();
}

/// Node-local transform that reproduces the global map `g` exactly.
inline RigidTransform to_node_local(const RigidTransform& g, const Point3& node) {
  return {g.rotation(), g(node) - node};
}

/// Global SE(3) map equivalent to node-local transform `t` about `node`.
inline RigidTransform to_global(const RigidTransform& t, const Point3& node) {
  return {t.rotation(), node + t.translation() - t.rotation() * node};
}

/// Pinhole intrinsics; camera looks down +z, image origin top-left.
struct Camera {
  double fx = 285.0;
  double fy = 285.0;
  double cx = 160.0;
  double cy = 120.0;
  int width = 320;
  int height = 240;

  bool is_valid() const {
    return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
  }

  bool in_bounds(const Vec2& px) const {
    return px.x() >= 0.0 && px.y() >= 0.0 && px.x() <= width - 1.0 && px.y() <= height - 1.0;
  }
};

inline Vec2 project(const Camera& cam, const Point3& p) {
  if (!(p.z() > 0.0)) fail(ErrorCode::BehindCamera, "point has z <= 0");
  return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

/// d(project)/dp, a 2x3 matrix.
inline Eigen::Matrix<double, 2, 3> project_jacobian(const Camera& cam, const Point3& p) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz,
       0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return j;
}

inline Point3 backproject(const Camera& cam, double u, double v, double depth) {
  if (!(depth > 0.0)) fail(ErrorCode::NonpositiveDepth, "depth must be positive");
  return {(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth};
}

/// Weighted least-squares rigid alignment (Kabsch/Umeyama, no scale):
/// argmin_T sum_i w_i |T(src_i) - dst_i|^2.
/// Throws DegenerateConfiguration when the weighted source points are
/// coincident or collinear, since rotation about that line is undetermined.
inline RigidTransform rigid_fit(std::span<const Point3> src, std::span<const Point3> dst,
                                std::span<const double> weights) {
  require(src.size() == dst.size() && src.size() == weights.size(), ErrorCode::SizeMismatch,
          "rigid_fit: src, dst and weights must have equal length");
  double wsum = 0.0;
  Vec3 cs = Vec3::Zero();
  Vec3 cd = Vec3::Zero();
  std::size_t positive = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    require(weights[i] >= 0.0 && std::isfinite(weights[i]), ErrorCode::InvalidArgument,
            "rigid_fit: weights must be finite and nonnegative");
    if (weights[i] == 0.0) continue;
    ++positive;
    wsum += weights[i];
    cs += weights[i] * src[i];
    cd += weights[i] * dst[i];
  }
  if (positive < 3) fail(ErrorCode::DegenerateConfiguration, "rigid_fit needs >= 3 weighted points");
  cs /= wsum;
  cd /= wsum;

  Mat3 cross = Mat3::Zero();
  Mat3 scatter = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const Vec3 a = src[i] - cs;
    const Vec3 b = dst[i] - cd;
    cross += weights[i] * a * b.transpose();
    scatter += weights[i] * a * a.transpose();
  }
  scatter /= wsum;

  Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
  const Vec3 ev = eig.eigenvalues();  // ascending
  if (ev(2) <= 1e-24 || ev(1) <= 1e-10 * ev(2)) {
    fail(ErrorCode::DegenerateConfiguration, "rigid_fit: source points are coincident or collinear");
  }

  Eigen::JacobiSVD<Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = orthonormalize(v * d * u.transpose());
  return {r, cd - r * cs};
}

inline RigidTransform rigid_fit(std::span<const Point3> src, std::span<const Point3> dst) {
  const std::vector<double> w(src.size(), 1.0);
  return rigid_fit(src, dst, w);
}

/// Translation-only weighted fit, the fallback when rigid_fit is degenerate.
inline RigidTransform translation_fit(std::span<const Point3> src, std::span<const Point3> dst,
                                      std::span<const double> weights) {
  double wsum = 0.0;
  Vec3 t = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    wsum += weights[i];
    t += weights[i] * (dst[i] - src[i]);
  }
  if (wsum <= 0.0) return RigidTransform::identity();
  return RigidTransform::from_translation(t / wsum);
}

}  // namespace ofusion
