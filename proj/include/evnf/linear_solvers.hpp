#pragma once

// Linear motion-and-structure solvers built on the normal-flow constraint
//   n^T O(x) theta = |n|^2
// with a generic stacked least-squares solve and a RANSAC wrapper.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "evnf/error.hpp"
#include "evnf/geometry.hpp"
#include "evnf/rng.hpp"

namespace evnf {

enum class ModelKind { OpticalFlow, Depth, AngularVelocity, SixDof, DiffHomographyLinear };

inline constexpr std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::OpticalFlow: return "optical_flow";
    case ModelKind::Depth: return "depth";
    case ModelKind::AngularVelocity: return "angular_velocity";
    case ModelKind::SixDof: return "six_dof";
    case ModelKind::DiffHomographyLinear: return "diff_homography";
  }
  return "unknown";
}

inline std::optional<ModelKind> parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::OpticalFlow, ModelKind::Depth, ModelKind::AngularVelocity, ModelKind::SixDof,
                 ModelKind::DiffHomographyLinear})
    if (s == to_string(k)) return k;
  if (s == "flow") return ModelKind::OpticalFlow;
  if (s == "angular" || s == "rotation") return ModelKind::AngularVelocity;
  if (s == "6dof" || s == "sixdof") return ModelKind::SixDof;
  if (s == "homography") return ModelKind::DiffHomographyLinear;
  return std::nullopt;
}

/// Observations needed by one minimal solve. Flow and depth are per pixel.
inline constexpr int minimal_sample_size(ModelKind k) {
  switch (k) {
    case ModelKind::OpticalFlow: return 1;
    case ModelKind::Depth: return 1;
    case ModelKind::AngularVelocity: return 3;
    case ModelKind::SixDof: return 6;
    case ModelKind::DiffHomographyLinear: return 8;
  }
  return 0;
}

/// Dimension of theta for the batch models.
inline constexpr int parameter_count(ModelKind k) {
  switch (k) {
    case ModelKind::OpticalFlow: return 2;
    case ModelKind::Depth: return 1;
    case ModelKind::AngularVelocity: return 3;
    case ModelKind::SixDof: return 6;
    case ModelKind::DiffHomographyLinear: return 9;
  }
  return 0;
}

inline constexpr bool is_batch_model(ModelKind k) {
  return k == ModelKind::AngularVelocity || k == ModelKind::SixDof || k == ModelKind::DiffHomographyLinear;
}

// ---------------------------------------------------------------------------
// Stacked least squares

enum class SolveMode {
  FullRank,     // column-pivoted QR
  MinimumNorm,  // truncated SVD at the required rank
};

struct SolveDiagnostics {
  int rank = 0;
  double condition = 0.0;
  double residual_rms = 0.0;
};

struct LinearSolution {
  Eigen::VectorXd theta;
  SolveDiagnostics diag;
};

inline constexpr double kRankTolerance = 1e-10;

/// Least squares for a x = b. The condition number is sigma_max over the
/// smallest singular value inside the required rank.
inline LinearSolution stack_and_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int required_rank,
                                      SolveMode mode = SolveMode::FullRank, double rank_tol = kRankTolerance) {
  if (a.rows() != b.rows()) throw Error(ErrorCode::InvalidArgument, "row count mismatch");
  if (required_rank <= 0 || required_rank > a.cols())
    throw Error(ErrorCode::InvalidArgument, "required rank out of range");
  if (a.rows() < required_rank) throw Error(ErrorCode::TooFewObservations, "fewer rows than the required rank");
  if (mode == SolveMode::FullRank && a.rows() < a.cols())
    throw Error(ErrorCode::TooFewObservations, "fewer rows than unknowns");
  if (!a.allFinite() || !b.allFinite()) throw Error(ErrorCode::NumericalFailure, "non-finite system");

  LinearSolution out;
  if (mode == SolveMode::FullRank) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    out.diag.rank = smax > 0.0 ? static_cast<int>((sv.array() > rank_tol * smax).count()) : 0;
    if (out.diag.rank < required_rank)
      throw Error(ErrorCode::RankDeficient,
                  "numerical rank " + std::to_string(out.diag.rank) + " < " + std::to_string(required_rank));
    out.diag.condition = smax / sv(required_rank - 1);
    out.theta = a.colPivHouseholderQr().solve(b);
  } else {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    out.diag.rank = smax > 0.0 ? static_cast<int>((sv.array() > rank_tol * smax).count()) : 0;
    if (out.diag.rank < required_rank)
      throw Error(ErrorCode::RankDeficient,
                  "numerical rank " + std::to_string(out.diag.rank) + " < " + std::to_string(required_rank));
    out.diag.condition = smax / sv(required_rank - 1);
    const auto u = svd.matrixU().leftCols(required_rank);
    const auto v = svd.matrixV().leftCols(required_rank);
    const Eigen::VectorXd coeff = (u.transpose() * b).cwiseQuotient(sv.head(required_rank));
    out.theta = v * coeff;
  }
  if (!out.theta.allFinite()) throw Error(ErrorCode::NumericalFailure, "non-finite solution");
  out.diag.residual_rms = std::sqrt((a * out.theta - b).squaredNorm() / static_cast<double>(a.rows()));
  return out;
}

// ---------------------------------------------------------------------------
// Per-observation rows n^T O(x)

inline Eigen::RowVector3d angular_row(const NormalFlowObs& o) { return o.n.transpose() * matrix_B(o.x); }

inline Eigen::Matrix<double, 1, 6> six_dof_row(const NormalFlowObs& o, double depth) {
  return o.n.transpose() * matrix_D(o.x, depth);
}

inline Eigen::Matrix<double, 1, 9> homography_row(const NormalFlowObs& o) { return o.n.transpose() * matrix_C(o.x); }

/// Per-kind context: per-observation depth for the 6-DoF model.
struct ModelContext {
  std::span<const double> depths;
};

struct StackedSystem {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

inline StackedSystem build_system(ModelKind kind, std::span<const NormalFlowObs> obs, const ModelContext& ctx = {}) {
  if (!is_batch_model(kind))
    throw Error(ErrorCode::InvalidArgument, std::string(to_string(kind)) + " is solved per observation");
  if (kind == ModelKind::SixDof && ctx.depths.size() != obs.size())
    throw Error(ErrorCode::InvalidArgument, "6-DoF model needs one depth per observation");
  const int p = parameter_count(kind);
  StackedSystem sys{Eigen::MatrixXd(obs.size(), p), Eigen::VectorXd(obs.size())};
  for (std::size_t i = 0; i < obs.size(); ++i) {
    switch (kind) {
      case ModelKind::AngularVelocity: sys.a.row(i) = angular_row(obs[i]); break;
      case ModelKind::SixDof: sys.a.row(i) = six_dof_row(obs[i], ctx.depths[i]); break;
      case ModelKind::DiffHomographyLinear: sys.a.row(i) = homography_row(obs[i]); break;
      default: break;
    }
    sys.b(i) = obs[i].mag2;
  }
  return sys;
}

inline int required_rank(ModelKind kind) {
  return kind == ModelKind::DiffHomographyLinear ? 8 : parameter_count(kind);
}

inline SolveMode solve_mode(ModelKind kind) {
  return kind == ModelKind::DiffHomographyLinear ? SolveMode::MinimumNorm : SolveMode::FullRank;
}

inline LinearSolution solve_batch(ModelKind kind, std::span<const NormalFlowObs> obs, const ModelContext& ctx = {}) {
  if (static_cast<int>(obs.size()) < minimal_sample_size(kind))
    throw Error(ErrorCode::TooFewObservations, std::to_string(obs.size()) + " observations, need " +
                                                   std::to_string(minimal_sample_size(kind)));
  const auto sys = build_system(kind, obs, ctx);
  return stack_and_solve(sys.a, sys.b, required_rank(kind), solve_mode(kind));
}

// ---------------------------------------------------------------------------
// Per-pixel models

inline constexpr double kPureRotationTol = 1e-12;

/// Full flow from one normal flow and known camera velocity: the normal-flow
/// constraint stacked with the differential epipolar constraint.
inline Vec2 solve_optical_flow(const NormalFlowObs& obs, const Velocity& v) {
  if (v.nu.norm() <= kPureRotationTol) throw Error(ErrorCode::PureRotation, "zero linear velocity");
  const auto [nx, s] = epipolar_terms(v);
  const Vec3 xh = obs.x.homogeneous();
  const Vec3 row = -(xh.transpose() * nx).transpose();
  Eigen::Matrix2d m;
  m.row(0) = obs.n.transpose();
  m.row(1) = row.head<2>().transpose();
  const Vec2 rhs(obs.mag2, xh.dot(s * xh));
  const double scale = obs.n.norm() * row.head<2>().norm();
  if (!(scale > 0.0) || std::abs(m.determinant()) <= 1e-10 * scale)
    throw Error(ErrorCode::SingularSystem, "normal flow is orthogonal to the epipolar line");
  return m.partialPivLu().solve(rhs);
}

struct DepthEstimate {
  double depth = 0.0;
  bool cheirality_ok = false;  // depth > 0
};

/// Z = n^T A nu / (|n|^2 - n^T B omega).
inline DepthEstimate solve_depth(const NormalFlowObs& obs, const Velocity& v) {
  if (v.nu.norm() <= kPureRotationTol) throw Error(ErrorCode::PureRotation, "zero linear velocity");
  const double rot = obs.n.dot(matrix_B(obs.x) * v.omega);
  const double den = obs.mag2 - rot;
  const Eigen::RowVector3d na = obs.n.transpose() * matrix_A(obs.x);
  const double num = na.dot(v.nu);
  if (std::abs(den) <= 1e-12 * std::max(obs.mag2, std::abs(rot)))
    throw Error(ErrorCode::RotationExplainsFlow, "rotation alone explains the normal flow");
  if (std::abs(num) <= 1e-12 * na.norm() * v.nu.norm())
    throw Error(ErrorCode::PureTranslationZeroNumerator, "translational flow is invisible along the gradient");
  const double z = num / den;
  return {z, z > 0.0};
}

inline Vec3 solve_angular_velocity(std::span<const NormalFlowObs> obs) {
  return solve_batch(ModelKind::AngularVelocity, obs).theta;
}

inline Velocity solve_6dof(std::span<const NormalFlowObs> obs, std::span<const double> depths) {
  if (depths.size() != obs.size()) throw Error(ErrorCode::InvalidArgument, "one depth per observation required");
  if (obs.size() < 6) throw Error(ErrorCode::TooFewObservations, "6-DoF model needs six observations");
  for (double z : depths)
    if (!(z > 0.0)) throw Error(ErrorCode::DegenerateDepth, "non-positive depth prior");
  const Vec6 th = solve_batch(ModelKind::SixDof, obs, {depths}).theta;
  return Velocity::from_stacked(th);
}

/// Minimum-norm solution H_L; any H_L + eps*I fits equally well. The
/// minimum-norm choice has trace(H_L) = 0.
inline Mat3 solve_diff_homography(std::span<const NormalFlowObs> obs) {
  return unvectorize(solve_batch(ModelKind::DiffHomographyLinear, obs).theta);
}

// ---------------------------------------------------------------------------
// RANSAC

struct RansacConfig {
  double threshold = 1e-4;  // on |eps_nf|, calibrated units^2/s^2
  int max_iterations = 1000;
  double confidence = 0.99;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int refit_rounds = 3;

  void validate() const {
    if (!(threshold > 0.0)) throw Error(ErrorCode::InvalidArgument, "RANSAC threshold must be positive");
    if (!(confidence > 0.0 && confidence < 1.0)) throw Error(ErrorCode::InvalidArgument, "confidence must be in (0,1)");
    if (max_iterations <= 0) throw Error(ErrorCode::InvalidArgument, "max_iterations must be positive");
  }
};

/// A threshold stated for pixel-unit normal flow maps to calibrated units by
/// dividing by fx*fy (the residual is quadratic in the flow scale).
inline double calibrated_threshold(double pixel_threshold, const Intrinsics& k) { return pixel_threshold / (k.fx * k.fy); }

struct FitReport {
  ModelKind kind = ModelKind::AngularVelocity;
  Eigen::VectorXd theta;
  std::vector<std::size_t> inliers;
  double rms = 0.0;  // over inliers
  double condition = 0.0;
  int iterations = 0;
};

namespace detail {

inline std::vector<std::size_t> inliers_of(const StackedSystem& sys, const Eigen::VectorXd& theta, double thresh) {
  const Eigen::VectorXd r = sys.a * theta - sys.b;
  std::vector<std::size_t> idx;
  for (Eigen::Index i = 0; i < r.size(); ++i)
    if (std::abs(r(i)) <= thresh) idx.push_back(static_cast<std::size_t>(i));
  return idx;
}

inline StackedSystem subset(const StackedSystem& sys, const std::vector<std::size_t>& idx) {
  StackedSystem s{Eigen::MatrixXd(idx.size(), sys.a.cols()), Eigen::VectorXd(idx.size())};
  for (std::size_t r = 0; r < idx.size(); ++r) {
    s.a.row(r) = sys.a.row(idx[r]);
    s.b(r) = sys.b(idx[r]);
  }
  return s;
}

inline int adaptive_bound(std::size_t inliers, std::size_t total, int sample, const RansacConfig& cfg) {
  if (inliers == 0) return cfg.max_iterations;
  const double w = static_cast<double>(inliers) / static_cast<double>(total);
  const double p_good = std::pow(w, sample);
  if (p_good >= 1.0) return 1;
  const double denom = std::log1p(-p_good);
  if (!(denom < 0.0)) return cfg.max_iterations;
  const double n = std::ceil(std::log1p(-cfg.confidence) / denom);
  return static_cast<int>(std::min<double>(cfg.max_iterations, std::max(1.0, n)));
}

struct Hypothesis {
  std::size_t count = 0;
  bool valid = false;
  Eigen::VectorXd theta;
};

}  // namespace detail

/// Minimal-sample RANSAC on |eps_nf| followed by least-squares refits on the
/// consensus set. Iteration i draws from its own stream derived from the
/// seed, and hypotheses are merged in iteration order, so the result does
/// not depend on cfg.threads.
inline FitReport ransac_estimate(std::span<const NormalFlowObs> obs, ModelKind kind, const ModelContext& ctx,
                                 const RansacConfig& cfg) {
  cfg.validate();
  if (!is_batch_model(kind))
    throw Error(ErrorCode::InvalidArgument, std::string(to_string(kind)) + " is solved per observation");
  const int c = minimal_sample_size(kind);
  if (static_cast<int>(obs.size()) < c)
    throw Error(ErrorCode::TooFewObservations,
                std::to_string(obs.size()) + " observations, minimal sample is " + std::to_string(c));
  const StackedSystem sys = build_system(kind, obs, ctx);
  const std::size_t total = obs.size();
  const int rank = required_rank(kind);
  const SolveMode mode = solve_mode(kind);

  auto hypothesis = [&](int iter) {
    detail::Hypothesis h;
    auto rng = make_stream(cfg.seed, static_cast<std::uint64_t>(iter));
    std::vector<std::size_t> sample;
    sample.reserve(c);
    while (static_cast<int>(sample.size()) < c) {
      std::uniform_int_distribution<std::size_t> pick(0, total - 1);
      const std::size_t s = pick(rng);
      if (std::find(sample.begin(), sample.end(), s) == sample.end()) sample.push_back(s);
    }
    std::sort(sample.begin(), sample.end());
    try {
      const auto sub = detail::subset(sys, sample);
      h.theta = stack_and_solve(sub.a, sub.b, rank, mode).theta;
      h.count = detail::inliers_of(sys, h.theta, cfg.threshold).size();
      h.valid = true;
    } catch (const Error&) {
    }
    return h;
  };

  const unsigned nthreads = std::max(1u, cfg.threads);
  const int batch = static_cast<int>(nthreads == 1 ? 1 : nthreads * 4);
  detail::Hypothesis best;
  int bound = cfg.max_iterations;
  int iter = 0;
  bool done = false;
  std::vector<detail::Hypothesis> results(batch);
  while (!done && iter < bound) {
    const int n = std::min(batch, cfg.max_iterations - iter);
    if (nthreads == 1) {
      results[0] = hypothesis(iter);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t] {
          for (int j = static_cast<int>(t); j < n; j += static_cast<int>(nthreads)) results[j] = hypothesis(iter + j);
        });
      }
      for (auto& th : pool) th.join();
    }
    // Serial merge reproduces the sequential loop exactly.
    for (int j = 0; j < n; ++j) {
      if (iter >= bound) {
        done = true;
        break;
      }
      const auto& h = results[j];
      if (h.valid && h.count > best.count) {
        best = h;
        bound = detail::adaptive_bound(best.count, total, c, cfg);
      }
      ++iter;
    }
  }

  if (!best.valid || best.count < static_cast<std::size_t>(2 * c))
    throw Error(ErrorCode::NoConsensus, "best consensus " + std::to_string(best.count) + " < " + std::to_string(2 * c));

  FitReport rep;
  rep.kind = kind;
  rep.iterations = iter;
  std::vector<std::size_t> inl = detail::inliers_of(sys, best.theta, cfg.threshold);
  LinearSolution sol;
  for (int round = 0; round < std::max(1, cfg.refit_rounds); ++round) {
    const auto sub = detail::subset(sys, inl);
    sol = stack_and_solve(sub.a, sub.b, rank, mode);
    auto next = detail::inliers_of(sys, sol.theta, cfg.threshold);
    const bool stable = next == inl;
    inl = std::move(next);
    if (stable || static_cast<int>(inl.size()) < rank) break;
  }
  rep.theta = sol.theta;
  rep.inliers = inl;
  rep.condition = sol.diag.condition;
  double sse = 0.0;
  for (auto i : inl) sse += std::pow(sys.a.row(i).dot(sol.theta) - sys.b(i), 2);
  rep.rms = inl.empty() ? 0.0 : std::sqrt(sse / inl.size());
  return rep;
}

}  // namespace evnf
