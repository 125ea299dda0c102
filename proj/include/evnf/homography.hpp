#pragma once

// Removing the eps*I ambiguity from a linearly estimated differential
// homography, and splitting H_d = -([w]x + (nu/d) N^T) into its two
// admissible motion/structure explanations.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "evnf/error.hpp"
#include "evnf/geometry.hpp"

namespace evnf {

struct SymmetricEigen {
  Vec3 values;   // descending
  Mat3 vectors;  // columns match `values`
};

/// Eigen-decomposition of a symmetric 3x3 matrix, sorted descending, with
/// each eigenvector's largest-magnitude component made positive.
inline SymmetricEigen symmetric_eigen(const Mat3& m) {
  const Mat3 sym = 0.5 * (m + m.transpose());
  const Eigen::SelfAdjointEigenSolver<Mat3> es(sym);
  if (es.info() != Eigen::Success) throw Error(ErrorCode::NumericalFailure, "eigen-decomposition failed");
  SymmetricEigen out;
  for (int i = 0; i < 3; ++i) {
    out.values(i) = es.eigenvalues()(2 - i);
    Vec3 v = es.eigenvectors().col(2 - i);
    // Near-ties resolve to the lowest index so the choice is reproducible.
    const double vmax = v.cwiseAbs().maxCoeff();
    int arg = 0;
    while (std::abs(v(arg)) < vmax * (1.0 - 1e-9)) ++arg;
    if (v(arg) < 0.0) v = -v;
    out.vectors.col(i) = v;
  }
  return out;
}

struct TrueHomography {
  Mat3 h_d;
  double epsilon = 0.0;
};

/// The middle eigenvalue of H_L + H_L^T equals 2*eps because H_d + H_d^T has
/// one positive, one zero and one negative eigenvalue.
inline TrueHomography recover_true_Hd(const Mat3& h_l) {
  if (!h_l.allFinite()) throw Error(ErrorCode::InvalidArgument, "non-finite homography");
  const auto eig = symmetric_eigen(h_l + h_l.transpose());
  const double eps = 0.5 * eig.values(1);
  return {h_l - eps * Mat3::Identity(), eps};
}

struct PlanarStructure {
  Vec3 nu_over_d = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 omega = Vec3::Zero();
  double skew_residual = 0.0;  // |sym(H_d + (nu/d) N^T)|_F

  Mat3 homography() const { return differential_homography(omega, nu_over_d, normal); }
};

enum class Degeneracy {
  None,
  PureRotation,  // nu = 0: plane unobservable, only omega is returned
  RankOne,       // nu parallel to N: the two candidates coincide
};

struct DecompositionResult {
  Degeneracy degeneracy = Degeneracy::None;
  std::vector<PlanarStructure> candidates;  // two, or empty for PureRotation
  Vec3 rotation_only_omega = Vec3::Zero();  // valid for PureRotation
  double lambda_max = 0.0;
  double lambda_mid = 0.0;
  double lambda_min = 0.0;
};

inline constexpr double kDegeneracyTol = 1e-8;

namespace detail {

/// One candidate from the ordered pair (a, b) with H_d + a b^T skew-symmetric.
inline PlanarStructure make_candidate(const Mat3& h_d, Vec3 a, Vec3 b) {
  if (b.z() < 0.0) {
    a = -a;
    b = -b;
  }
  const double bn = b.norm();
  PlanarStructure c;
  c.nu_over_d = a * bn;
  c.normal = b / bn;
  const Mat3 rot = h_d + a * b.transpose();
  c.omega = -vee(rot);
  c.skew_residual = (0.5 * (rot + rot.transpose())).norm();
  return c;
}

}  // namespace detail

/// Splits a true differential homography into the two candidate sets
/// {nu/d, N, w}. Candidates are sign-normalized so that N_z >= 0.
inline DecompositionResult decompose_Hd(const Mat3& h_d) {
  if (!h_d.allFinite()) throw Error(ErrorCode::InvalidArgument, "non-finite homography");
  const Mat3 m = -(h_d + h_d.transpose());
  DecompositionResult out;
  const double scale = h_d.norm();
  if (scale == 0.0 || m.norm() < kDegeneracyTol * scale) {
    out.degeneracy = Degeneracy::PureRotation;
    out.rotation_only_omega = -vee(h_d);
    return out;
  }

  const auto eig = symmetric_eigen(m);
  out.lambda_max = eig.values(0);
  out.lambda_mid = eig.values(1);
  out.lambda_min = eig.values(2);
  const double lmax = std::max(0.0, out.lambda_max);
  const double lmin = std::min(0.0, out.lambda_min);
  const double big = std::max(std::abs(out.lambda_max), std::abs(out.lambda_min));
  if (std::abs(out.lambda_max) <= kDegeneracyTol * big || std::abs(out.lambda_min) <= kDegeneracyTol * big)
    out.degeneracy = Degeneracy::RankOne;

  const Vec3 p = std::sqrt(lmax / 2.0) * eig.vectors.col(0);
  const Vec3 q = std::sqrt(-lmin / 2.0) * eig.vectors.col(2);
  const Vec3 j = p + q;
  const Vec3 k = p - q;
  out.candidates.push_back(detail::make_candidate(h_d, j, k));
  out.candidates.push_back(detail::make_candidate(h_d, k, j));
  return out;
}

/// Parameter-wise Euclidean distance between two planar explanations.
inline double structure_distance(const PlanarStructure& a, const PlanarStructure& b) {
  return std::sqrt((a.nu_over_d - b.nu_over_d).squaredNorm() + (a.normal - b.normal).squaredNorm() +
                   (a.omega - b.omega).squaredNorm());
}

}  // namespace evnf
