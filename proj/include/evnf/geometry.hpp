#pragma once

// Motion-field and differential two-view geometry on calibrated image
// coordinates. Everything here is a pure function of its arguments.

#include <cmath>
#include <utility>

#include <Eigen/Core>

#include "evnf/error.hpp"

namespace evnf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat29 = Eigen::Matrix<double, 2, 9>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;

inline constexpr double kDefaultFovLimit = 3.0;
inline constexpr double kDefaultMinNormalFlow = 1e-9;

/// Point on the normalized image plane (z = 1).
struct CalibratedPoint {
  double x = 0.0;
  double y = 0.0;

  Vec2 vec() const { return {x, y}; }
  Vec3 homogeneous() const { return {x, y, 1.0}; }

  bool finite() const { return std::isfinite(x) && std::isfinite(y); }
  bool within_fov(double limit = kDefaultFovLimit) const {
    return finite() && std::abs(x) <= limit && std::abs(y) <= limit;
  }
};

struct Intrinsics {
  double fx = 200.0;
  double fy = 200.0;
  double cx = 120.0;
  double cy = 90.0;
  int width = 240;
  int height = 180;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw Error(ErrorCode::InvalidArgument, "focal lengths must be positive");
    if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "sensor size must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
      throw Error(ErrorCode::InvalidArgument, "principal point outside the sensor");
  }
};

struct Velocity {
  Vec3 nu = Vec3::Zero();
  Vec3 omega = Vec3::Zero();

  Vec6 stacked() const {
    Vec6 v;
    v << nu, omega;
    return v;
  }
  static Velocity from_stacked(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }
};

/// A sparse normal-flow measurement. `n` is in calibrated units per second.
struct NormalFlowObs {
  CalibratedPoint x;
  Vec2 n = Vec2::Zero();
  double t = 0.0;
  double mag2 = 0.0;

  NormalFlowObs() = default;
  NormalFlowObs(CalibratedPoint x_, const Vec2& n_, double t_) : x(x_), n(n_), t(t_), mag2(n_.dot(n_)) {}

  bool valid(double min_norm = kDefaultMinNormalFlow) const { return std::sqrt(mag2) > min_norm && n.allFinite(); }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Inverse of `skew`. Only the skew-symmetric part of `m` is used.
inline Vec3 vee(const Mat3& m) {
  const Mat3 s = 0.5 * (m - m.transpose());
  return {s(2, 1), s(0, 2), s(1, 0)};
}

/// Translational part of the motion field: u = A(x) nu / Z + B(x) omega.
inline Mat23 matrix_A(const CalibratedPoint& p) {
  Mat23 a;
  a << -1.0, 0.0, p.x,
       0.0, -1.0, p.y;
  return a;
}

/// Rotational part of the motion field.
inline Mat23 matrix_B(const CalibratedPoint& p) {
  const double x = p.x;
  const double y = p.y;
  Mat23 b;
  b << x * y, -(1.0 + x * x), y,
       1.0 + y * y, -x * y, -x;
  return b;
}

/// Linear map from the row-major vectorization h = (H11, H12, H13, H21, ...,
/// H33) of a differential homography to the flow it induces at `p`, i.e. the
/// first two components of (I - x e3^T) H x with x = (x, y, 1).
inline Mat29 matrix_C(const CalibratedPoint& p) {
  const Vec3 xh = p.homogeneous();
  Mat29 c = Mat29::Zero();
  c.block<1, 3>(0, 0) = xh.transpose();
  c.block<1, 3>(0, 6) = -p.x * xh.transpose();
  c.block<1, 3>(1, 3) = xh.transpose();
  c.block<1, 3>(1, 6) = -p.y * xh.transpose();
  return c;
}

inline Vec9 vectorize(const Mat3& h) {
  Vec9 v;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v(3 * r + c) = h(r, c);
  return v;
}

inline Mat3 unvectorize(const Vec9& v) {
  Mat3 h;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) h(r, c) = v(3 * r + c);
  return h;
}

/// Feature sensitivity matrix [A(x)/Z | B(x)].
inline Mat26 matrix_D(const CalibratedPoint& p, double depth) {
  if (!(depth > 0.0)) throw Error(ErrorCode::DegenerateDepth, "depth must be positive");
  Mat26 d;
  d << matrix_A(p) / depth, matrix_B(p);
  return d;
}

struct EpipolarTerms {
  Mat3 nu_skew;
  Mat3 s;
};

/// [nu]x and the symmetric matrix s = ([nu]x[w]x + [w]x[nu]x) / 2.
inline EpipolarTerms epipolar_terms(const Velocity& v) {
  const Mat3 nx = skew(v.nu);
  const Mat3 wx = skew(v.omega);
  Mat3 s = 0.5 * (nx * wx + wx * nx);
  s = 0.5 * (s + s.transpose());
  return {nx, s};
}

/// Differential epipolar residual u^T [nu]x x - x^T s x.
inline double epipolar_residual(const CalibratedPoint& p, const Vec2& u, const Velocity& v) {
  const auto [nx, s] = epipolar_terms(v);
  const Vec3 xh = p.homogeneous();
  const Vec3 uh(u.x(), u.y(), 0.0);
  return uh.dot(nx * xh) - xh.dot(s * xh);
}

/// H_d = -([w]x + nu_over_d N^T).
inline Mat3 differential_homography(const Vec3& omega, const Vec3& nu_over_d, const Vec3& normal) {
  return -(skew(omega) + nu_over_d * normal.transpose());
}

/// Flow induced by a differential homography, evaluated directly from the
/// homogeneous form rather than through matrix_C.
inline Vec2 homography_flow(const Mat3& h, const CalibratedPoint& p) {
  const Vec3 xh = p.homogeneous();
  const Vec3 w = h * xh;
  return {w.x() - p.x * w.z(), w.y() - p.y * w.z()};
}

/// Normal-flow constraint error n^T u - |n|^2.
inline double nf_residual(const NormalFlowObs& obs, const Vec2& u) { return obs.n.dot(u) - obs.mag2; }

struct CalibratedMeasurement {
  CalibratedPoint point;
  Vec2 gradient;
};

/// Maps a pixel location and a time-surface gradient (s/px) to calibrated
/// coordinates. The gradient is covariant: g_cal = diag(fx, fy) g_px.
inline CalibratedMeasurement pixel_to_calibrated(const Vec2& px, const Vec2& gradient_px, const Intrinsics& k) {
  if (!(px.x() >= 0.0 && px.x() <= k.width - 1.0 && px.y() >= 0.0 && px.y() <= k.height - 1.0))
    throw Error(ErrorCode::OutOfBounds, "pixel outside the sensor");
  return {{(px.x() - k.cx) / k.fx, (px.y() - k.cy) / k.fy},
          {k.fx * gradient_px.x(), k.fy * gradient_px.y()}};
}

inline CalibratedPoint pixel_to_calibrated(const Vec2& px, const Intrinsics& k) {
  return pixel_to_calibrated(px, Vec2::Zero(), k).point;
}

inline Vec2 calibrated_to_pixel(const CalibratedPoint& p, const Intrinsics& k) {
  return {k.fx * p.x + k.cx, k.fy * p.y + k.cy};
}

/// Flow vectors are contravariant: u_px = diag(fx, fy) u_cal.
inline Vec2 flow_to_pixel(const Vec2& u_cal, const Intrinsics& k) { return {k.fx * u_cal.x(), k.fy * u_cal.y()}; }
inline Vec2 flow_to_calibrated(const Vec2& u_px, const Intrinsics& k) { return {u_px.x() / k.fx, u_px.y() / k.fy}; }

}  // namespace evnf
