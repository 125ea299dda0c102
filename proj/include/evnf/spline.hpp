#pragma once

// Continuous-time model parameters as a uniform cubic B-spline, and the
// batch fit of all asynchronous normal-flow observations against it.
//
// Control point c_i sits at knot time t0 + i*dt. A time t with
// s = (t - t0)/dt, i = floor(s), u = s - i is influenced by c_{i-1} .. c_{i+2},
// so the fully supported domain for n control points is
// [t0 + dt, t0 + (n-2) dt).

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "evnf/error.hpp"
#include "evnf/geometry.hpp"
#include "evnf/linear_solvers.hpp"

namespace evnf {

/// Uniform cubic B-spline weights for the four active control points.
inline std::array<double, 4> basis_weights(double u) {
  if (!(u >= 0.0 && u < 1.0)) throw Error(ErrorCode::OutOfDomain, "local spline parameter outside [0,1)");
  const double u2 = u * u;
  const double u3 = u2 * u;
  const double v = 1.0 - u;
  return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
          u3 / 6.0};
}

class SplineTrajectory {
 public:
  static constexpr double kDomainSlack = 1e-9;

  SplineTrajectory() = default;
  SplineTrajectory(Eigen::MatrixXd control_points, double t0, double dt)
      : control_(std::move(control_points)), t0_(t0), dt_(dt) {
    if (control_.cols() < 4) throw Error(ErrorCode::InvalidArgument, "a cubic spline needs at least 4 control points");
    if (!(dt_ > 0.0)) throw Error(ErrorCode::InvalidArgument, "knot spacing must be positive");
  }

  /// Smallest layout whose full-support domain contains [t_begin, t_end).
  /// The domain starts exactly at t_begin.
  static SplineTrajectory covering(double t_begin, double t_end, double dt, int dimension) {
    if (!(dt > 0.0) || !(t_end > t_begin)) throw Error(ErrorCode::InvalidArgument, "bad spline interval");
    const double t0 = t_begin - dt;
    int n = 3 + std::max(1, static_cast<int>(std::ceil((t_end - t_begin) / dt - 1e-9)));
    while (t0 + (n - 2) * dt < t_end - kDomainSlack * dt) ++n;
    return SplineTrajectory(Eigen::MatrixXd::Zero(dimension, n), t0, dt);
  }

  int dimension() const { return static_cast<int>(control_.rows()); }
  int size() const { return static_cast<int>(control_.cols()); }
  double t0() const { return t0_; }
  double dt() const { return dt_; }
  double domain_begin() const { return t0_ + dt_; }
  double domain_end() const { return t0_ + (size() - 2) * dt_; }
  /// Knot times carry rounding error, so the ends get a slack of
  /// kDomainSlack * dt.
  bool in_domain(double t) const {
    return t >= domain_begin() - kDomainSlack * dt_ && t < domain_end() + kDomainSlack * dt_;
  }
  /// Number of knot intervals inside the domain; segment index i runs 1..segments().
  int segments() const { return size() - 3; }
  double knot_time(int i) const { return t0_ + i * dt_; }

  const Eigen::MatrixXd& control_points() const { return control_; }
  Eigen::MatrixXd& control_points() { return control_; }

  struct Location {
    int segment;  // active control points segment-1 .. segment+2
    double u;
  };

  Location locate(double t) const {
    if (!in_domain(t)) throw Error(ErrorCode::OutOfDomain, "time " + std::to_string(t) + " outside the spline domain");
    const double s = (t - t0_) / dt_;
    const int i = std::clamp(static_cast<int>(std::floor(s)), 1, size() - 3);
    const double u = std::clamp(s - i, 0.0, std::nextafter(1.0, 0.0));
    return {i, u};
  }

  Eigen::VectorXd evaluate(double t) const {
    const auto [i, u] = locate(t);
    const auto w = basis_weights(u);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dimension());
    for (int j = 0; j < 4; ++j) v += w[j] * control_.col(i - 1 + j);
    return v;
  }

 private:
  Eigen::MatrixXd control_;  // dimension x count
  double t0_ = 0.0;
  double dt_ = 0.05;
};

struct SplineFitConfig {
  bool robust = true;
  double huber_scale_factor = 3.0;  // delta = factor * median |residual|
  int max_irls_rounds = 20;
  double starved_regularization = 1e-3;  // relative to the mean row norm
};

struct SplineFitReport {
  double rms = 0.0;
  double huber_delta = 0.0;
  int rounds = 0;
  std::vector<double> objective;             // Huber objective per IRLS iterate
  std::vector<std::size_t> segment_counts;   // observations per domain segment
  std::vector<int> starved_segments;         // segment indices with no data
};

struct SplineFitResult {
  SplineTrajectory trajectory;
  SplineFitReport report;
};

namespace detail {

inline int spline_dimension(ModelKind kind) {
  if (kind == ModelKind::AngularVelocity) return 3;
  if (kind == ModelKind::SixDof) return 6;
  throw Error(ErrorCode::InvalidArgument, "continuous-time fitting supports angular_velocity and six_dof");
}

/// Observation order used for assembly: by timestamp, then location, then
/// flow. Makes the fit independent of input order.
inline std::vector<std::size_t> canonical_order(std::span<const NormalFlowObs> obs) {
  std::vector<std::size_t> idx(obs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& p = obs[a];
    const auto& q = obs[b];
    return std::tie(p.t, p.x.x, p.x.y, p.n.x(), p.n.y()) < std::tie(q.t, q.x.x, q.x.y, q.n.x(), q.n.y());
  });
  return idx;
}

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * a - 0.5 * delta * delta;
}

inline double median_abs(const Eigen::VectorXd& r) {
  std::vector<double> a(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) a[i] = std::abs(r(i));
  if (a.empty()) return 0.0;
  auto mid = a.begin() + a.size() / 2;
  std::nth_element(a.begin(), mid, a.end());
  return *mid;
}

}  // namespace detail

struct SplineFitProblem {
  std::span<const NormalFlowObs> observations;
  ModelKind kind = ModelKind::AngularVelocity;
  ModelContext context;  // depths for SixDof
  SplineFitConfig config;
};

/// Minimizes sum_k rho(n_k^T O(x_k) theta(t_k) - |n_k|^2) over the control
/// points. Residuals are linear in the control points, so each IRLS round is
/// one weighted linear least-squares solve; rho is Huber with a scale fixed
/// after the first unweighted solve.
inline SplineFitResult fit(const SplineFitProblem& problem, const SplineTrajectory& init) {
  const int dim = detail::spline_dimension(problem.kind);
  if (init.dimension() != dim) throw Error(ErrorCode::InvalidArgument, "spline dimension does not match the model");
  const auto obs = problem.observations;
  if (problem.kind == ModelKind::SixDof && problem.context.depths.size() != obs.size())
    throw Error(ErrorCode::InvalidArgument, "6-DoF model needs one depth per observation");
  const int n = init.size();
  const int unknowns = n * dim;
  if (static_cast<int>(obs.size()) < unknowns)
    throw Error(ErrorCode::UnderDetermined,
                std::to_string(obs.size()) + " observations for " + std::to_string(unknowns) + " unknowns");

  const auto order = detail::canonical_order(obs);
  SplineFitReport rep;
  rep.segment_counts.assign(init.segments(), 0);

  const Eigen::Index k = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, unknowns);
  Eigen::VectorXd b(k);
  double row_norm_sum = 0.0;
  for (Eigen::Index r = 0; r < k; ++r) {
    const std::size_t src = order[r];
    const auto& o = obs[src];
    const auto [seg, u] = init.locate(o.t);
    ++rep.segment_counts[seg - 1];
    Eigen::RowVectorXd row(dim);
    if (problem.kind == ModelKind::AngularVelocity) row = angular_row(o);
    else row = six_dof_row(o, problem.context.depths[src]);
    row_norm_sum += row.norm();
    const auto w = basis_weights(u);
    for (int j = 0; j < 4; ++j) a.block(r, (seg - 1 + j) * dim, 1, dim) = w[j] * row;
    b(r) = o.mag2;
  }

  // Second-difference rows tie the control points of empty segments to
  // their neighbours; they vanish on linear trajectories.
  std::vector<std::array<int, 3>> reg;
  for (int s = 1; s <= init.segments(); ++s) {
    if (rep.segment_counts[s - 1] != 0) continue;
    rep.starved_segments.push_back(s);
    for (int m : {s, s + 1})
      if (m >= 1 && m <= n - 2 &&
          std::find(reg.begin(), reg.end(), std::array<int, 3>{m - 1, m, m + 1}) == reg.end())
        reg.push_back({m - 1, m, m + 1});
  }
  const double lambda = problem.config.starved_regularization * (row_norm_sum / static_cast<double>(k));
  const Eigen::Index nreg = static_cast<Eigen::Index>(reg.size()) * dim;
  Eigen::MatrixXd r_rows = Eigen::MatrixXd::Zero(nreg, unknowns);
  for (std::size_t q = 0; q < reg.size(); ++q) {
    for (int d = 0; d < dim; ++d) {
      const Eigen::Index row = static_cast<Eigen::Index>(q) * dim + d;
      r_rows(row, reg[q][0] * dim + d) = lambda;
      r_rows(row, reg[q][1] * dim + d) = -2.0 * lambda;
      r_rows(row, reg[q][2] * dim + d) = lambda;
    }
  }

  auto solve_weighted = [&](const Eigen::VectorXd& w) {
    Eigen::MatrixXd m(k + nreg, unknowns);
    Eigen::VectorXd rhs(k + nreg);
    const Eigen::VectorXd sw = w.cwiseSqrt();
    m.topRows(k) = sw.asDiagonal() * a;
    rhs.head(k) = sw.cwiseProduct(b);
    m.bottomRows(nreg) = r_rows;
    rhs.tail(nreg).setZero();
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
    if (qr.rank() < unknowns) throw Error(ErrorCode::UnderDetermined, "spline system is rank deficient");
    Eigen::VectorXd x = qr.solve(rhs);
    if (!x.allFinite()) throw Error(ErrorCode::NumericalFailure, "non-finite spline solution");
    return x;
  };
  auto objective = [&](const Eigen::VectorXd& x, double delta) {
    const Eigen::VectorXd r = a * x - b;
    double f = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) f += delta > 0.0 ? detail::huber(r(i), delta) : 0.5 * r(i) * r(i);
    f += 0.5 * (r_rows * x).squaredNorm();
    return f;
  };

  Eigen::VectorXd x = solve_weighted(Eigen::VectorXd::Ones(k));
  Eigen::VectorXd res = a * x - b;
  double delta = 0.0;
  if (problem.config.robust) {
    delta = problem.config.huber_scale_factor * detail::median_abs(res);
    // An (almost) exact fit leaves nothing to reweight.
    if (!(delta > 1e-14 * std::max(1.0, b.cwiseAbs().maxCoeff()))) delta = 0.0;
  }
  rep.huber_delta = delta;
  rep.objective.push_back(objective(x, delta));
  if (delta > 0.0) {
    for (int round = 0; round < problem.config.max_irls_rounds; ++round) {
      Eigen::VectorXd w(k);
      for (Eigen::Index i = 0; i < k; ++i) w(i) = std::abs(res(i)) <= delta ? 1.0 : delta / std::abs(res(i));
      const Eigen::VectorXd next = solve_weighted(w);
      const double f = objective(next, delta);
      ++rep.rounds;
      if (f > rep.objective.back()) break;  // rounding noise at convergence
      const double prev = rep.objective.back();
      x = next;
      res = a * x - b;
      rep.objective.push_back(f);
      if (prev - f <= 1e-12 * std::max(prev, 1e-300)) break;
    }
  }
  rep.rms = std::sqrt(res.squaredNorm() / static_cast<double>(k));

  Eigen::MatrixXd ctrl(dim, n);
  for (int i = 0; i < n; ++i) ctrl.col(i) = x.segment(i * dim, dim);
  return {SplineTrajectory(std::move(ctrl), init.t0(), init.dt()), rep};
}

struct SplineInit {
  SplineTrajectory trajectory;
  std::vector<Eigen::VectorXd> segment_estimates;  // per domain segment
  std::vector<bool> filled;                        // true where a neighbour average was used
};

/// Per-segment RANSAC linear fits, then control points that make the spline
/// pass through the segment estimates at the segment midpoints.
inline SplineInit init_from_linear(std::span<const NormalFlowObs> obs, ModelKind kind, const ModelContext& ctx,
                                   SplineTrajectory layout, const RansacConfig& ransac) {
  const int dim = detail::spline_dimension(kind);
  if (layout.dimension() != dim) throw Error(ErrorCode::InvalidArgument, "spline dimension does not match the model");
  const int segs = layout.segments();
  std::vector<std::vector<std::size_t>> members(segs);
  for (std::size_t i = 0; i < obs.size(); ++i) members[layout.locate(obs[i].t).segment - 1].push_back(i);

  SplineInit out{layout, std::vector<Eigen::VectorXd>(segs), std::vector<bool>(segs, false)};
  std::vector<bool> ok(segs, false);
  std::optional<Error> first_error;
  for (int s = 0; s < segs; ++s) {
    const auto& idx = members[s];
    if (static_cast<int>(idx.size()) < minimal_sample_size(kind)) continue;
    std::vector<NormalFlowObs> sub;
    std::vector<double> depths;
    for (auto i : idx) {
      sub.push_back(obs[i]);
      if (kind == ModelKind::SixDof) depths.push_back(ctx.depths[i]);
    }
    try {
      auto cfg = ransac;
      cfg.seed = derive_seed(ransac.seed, static_cast<std::uint64_t>(s));
      out.segment_estimates[s] = ransac_estimate(sub, kind, {depths}, cfg).theta;
      ok[s] = true;
    } catch (const Error& e) {
      if (!first_error) first_error = e;
    }
  }
  if (std::none_of(ok.begin(), ok.end(), [](bool b) { return b; })) {
    if (first_error) throw *first_error;
    throw Error(ErrorCode::TooFewObservations, "no knot interval holds a minimal sample");
  }
  for (int s = 0; s < segs; ++s) {
    if (ok[s]) continue;
    int lo = s - 1;
    while (lo >= 0 && !ok[lo]) --lo;
    int hi = s + 1;
    while (hi < segs && !ok[hi]) ++hi;
    if (lo >= 0 && hi < segs) out.segment_estimates[s] = 0.5 * (out.segment_estimates[lo] + out.segment_estimates[hi]);
    else out.segment_estimates[s] = out.segment_estimates[lo >= 0 ? lo : hi];
    out.filled[s] = true;
  }

  // theta(midpoint of segment s) = (c_{s-1} + 23 c_s + 23 c_{s+1} + c_{s+2}) / 48.
  // The midpoint kernel vanishes on the alternating sequence, so exact
  // interpolation of a jump rings indefinitely; second-difference rows of
  // unit order damp that mode. Constant estimates are still reproduced exactly.
  const int n = layout.size();
  const auto w = basis_weights(0.5);
  constexpr double kSmooth = 0.3;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(segs + (n - 2), n);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(segs + (n - 2), dim);
  for (int s = 0; s < segs; ++s) {
    for (int j = 0; j < 4; ++j) m(s, s + j) = w[j];
    rhs.row(s) = out.segment_estimates[s].transpose();
  }
  for (int i = 1; i <= n - 2; ++i) {
    m(segs + i - 1, i - 1) = kSmooth;
    m(segs + i - 1, i) = -2.0 * kSmooth;
    m(segs + i - 1, i + 1) = kSmooth;
  }
  const Eigen::MatrixXd ctrl = m.colPivHouseholderQr().solve(rhs);
  out.trajectory = SplineTrajectory(ctrl.transpose(), layout.t0(), layout.dt());
  return out;
}

}  // namespace evnf
