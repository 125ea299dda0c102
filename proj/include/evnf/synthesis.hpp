#pragma once

// Ground-truth simulator: scenes, motion profiles, exact motion fields,
// sampled normal flows with noise/outliers, analytic time surfaces of moving
// edges, and the global-flow registration toy problem.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <thread>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "evnf/error.hpp"
#include "evnf/events.hpp"
#include "evnf/geometry.hpp"
#include "evnf/linear_solvers.hpp"
#include "evnf/rng.hpp"
#include "evnf/spline.hpp"

namespace evnf {

// ---------------------------------------------------------------------------
// Scenes

struct RandomPointsScene {
  double depth_min = 2.0;
  double depth_max = 6.0;
};

/// Plane N^T P = d in the camera frame.
struct PlaneScene {
  Vec3 normal = Vec3::UnitZ();
  double distance = 3.0;
};

/// Two vertical walls meeting at x = 0, `distance` ahead, with the given
/// opening angle (pi is a single fronto-parallel wall).
struct TwoWallsScene {
  double angle = 0.75 * std::numbers::pi;
  double distance = 3.0;
};

using SceneSpec = std::variant<RandomPointsScene, PlaneScene, TwoWallsScene>;

inline void validate(const SceneSpec& scene) {
  std::visit(
      [](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, RandomPointsScene>) {
          if (!(s.depth_min > 0.0 && s.depth_max >= s.depth_min))
            throw Error(ErrorCode::InvalidArgument, "depth range must be positive and ordered");
        } else if constexpr (std::is_same_v<T, PlaneScene>) {
          if (!(s.distance > 0.0) || std::abs(s.normal.norm() - 1.0) > 1e-9)
            throw Error(ErrorCode::InvalidArgument, "plane needs a unit normal and positive distance");
        } else {
          if (!(s.distance > 0.0) || !(s.angle > 0.0 && s.angle <= std::numbers::pi))
            throw Error(ErrorCode::InvalidArgument, "walls need an opening angle in (0, pi] and positive distance");
        }
      },
      scene);
}

/// Depth of the scene along the ray through `p`; empty when the ray misses
/// the visible side of the surface. Random-point scenes draw from `rng`.
template <typename Rng>
std::optional<double> scene_depth(const SceneSpec& scene, const CalibratedPoint& p, Rng* rng) {
  return std::visit(
      [&](const auto& s) -> std::optional<double> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, RandomPointsScene>) {
          if (rng == nullptr) return 0.5 * (s.depth_min + s.depth_max);
          return std::uniform_real_distribution<double>(s.depth_min, s.depth_max)(*rng);
        } else if constexpr (std::is_same_v<T, PlaneScene>) {
          const double c = s.normal.dot(p.homogeneous());
          if (!(c > 1e-9)) return std::nullopt;
          return s.distance / c;
        } else {
          const double tilt = 0.5 * (std::numbers::pi - s.angle);
          const double c = std::cos(tilt) + std::abs(p.x) * std::sin(tilt);
          return s.distance * std::cos(tilt) / c;
        }
      },
      scene);
}

// ---------------------------------------------------------------------------
// Motion

struct ConstantMotion {
  Velocity velocity;
};

struct StepMotion {
  Velocity before;
  Velocity after;
  double t_switch = 0.0;
};

/// Rows are (nu, omega) for a 6-dimensional spline, or omega alone for a
/// 3-dimensional one (pure rotation).
struct SplineMotion {
  SplineTrajectory trajectory;
};

using MotionProfile = std::variant<ConstantMotion, StepMotion, SplineMotion>;

inline Velocity velocity_at(const MotionProfile& motion, double t) {
  return std::visit(
      [t](const auto& m) -> Velocity {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ConstantMotion>) {
          return m.velocity;
        } else if constexpr (std::is_same_v<T, StepMotion>) {
          return t < m.t_switch ? m.before : m.after;
        } else {
          const Eigen::VectorXd th = m.trajectory.evaluate(t);
          if (th.size() == 3) return {Vec3::Zero(), th};
          if (th.size() == 6) return Velocity::from_stacked(th);
          throw Error(ErrorCode::InvalidArgument, "spline motion must be 3- or 6-dimensional");
        }
      },
      motion);
}

// ---------------------------------------------------------------------------
// Motion field and normal-flow sampling

/// u = A(x) nu / Z + B(x) omega.
inline Vec2 ground_truth_flow(const CalibratedPoint& p, double depth, const Velocity& v) {
  if (!(depth > 0.0)) throw Error(ErrorCode::DegenerateDepth, "depth must be positive");
  return matrix_A(p) * v.nu / depth + matrix_B(p) * v.omega;
}

inline constexpr double kUnobservableThreshold = 1e-6;

struct NormalFlowSample {
  Vec2 n = Vec2::Zero();
  bool observable = false;
};

/// Projection of the full flow on a unit gradient direction.
inline NormalFlowSample sample_normal_flow(const Vec2& u, const Vec2& gradient_dir) {
  if (std::abs(gradient_dir.norm() - 1.0) > 1e-9) throw Error(ErrorCode::InvalidArgument, "gradient must be unit");
  const double along = u.dot(gradient_dir);
  return {along * gradient_dir, std::abs(along) >= kUnobservableThreshold};
}

struct NoiseSpec {
  double sigma_px = 0.0;  // per normal-flow component, px/s
  double outlier_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma_px >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise sigma must be non-negative");
    if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0))
      throw Error(ErrorCode::InvalidArgument, "outlier fraction must be in [0, 1)");
  }
};

struct TimeWindow {
  double begin = 0.0;
  double end = 0.04;
};

struct Dataset {
  std::vector<NormalFlowObs> observations;
  std::vector<Vec2> pixels;
  std::vector<double> depths;
  std::vector<Vec2> full_flows;  // calibrated
  std::vector<Velocity> velocities;
  std::vector<bool> outlier;
  std::optional<Velocity> constant_velocity;
  std::optional<Mat3> homography;  // plane scene under constant motion

  /// Ground-truth parameter vector of a batch model, when defined.
  std::optional<Eigen::VectorXd> theta(ModelKind kind) const {
    if (!constant_velocity) return std::nullopt;
    switch (kind) {
      case ModelKind::AngularVelocity: return Eigen::VectorXd(constant_velocity->omega);
      case ModelKind::SixDof: return Eigen::VectorXd(constant_velocity->stacked());
      case ModelKind::DiffHomographyLinear:
        if (homography) return Eigen::VectorXd(vectorize(*homography));
        return std::nullopt;
      default: return std::nullopt;
    }
  }
};

struct GenerationOptions {
  unsigned threads = 1;
  int max_attempts = 1000;  // per sample, for rays that miss or unobservable gradients
};

/// Draws `count` samples: pixel and time uniform over the sensor and window,
/// gradient direction uniform on the circle. Sample i uses its own random
/// stream, so output depends only on the seed.
inline Dataset generate_dataset(const SceneSpec& scene, const MotionProfile& motion, const Intrinsics& k,
                                std::size_t count, const TimeWindow& window, const NoiseSpec& noise,
                                const GenerationOptions& opts = {}) {
  validate(scene);
  k.validate();
  noise.validate();
  if (!(window.end > window.begin)) throw Error(ErrorCode::InvalidArgument, "empty time window");

  Dataset ds;
  ds.observations.resize(count);
  ds.pixels.resize(count);
  ds.depths.resize(count);
  ds.full_flows.resize(count);
  ds.velocities.resize(count);
  std::vector<char> outlier(count, 0);
  std::vector<char> failed(count, 0);

  const Vec2 sigma_cal(noise.sigma_px / k.fx, noise.sigma_px / k.fy);
  auto draw = [&](std::size_t i) {
    auto rng = make_stream(noise.seed, i);
    std::uniform_real_distribution<double> ux(0.0, k.width - 1.0);
    std::uniform_real_distribution<double> uy(0.0, k.height - 1.0);
    std::uniform_real_distribution<double> ut(window.begin, window.end);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
      const Vec2 px(ux(rng), uy(rng));
      const double t = ut(rng);
      const CalibratedPoint p = pixel_to_calibrated(px, k);
      const auto z = scene_depth(scene, p, &rng);
      if (!z) continue;
      const Velocity v = velocity_at(motion, t);
      const Vec2 u = ground_truth_flow(p, *z, v);
      const double a = angle(rng);
      const auto s = sample_normal_flow(u, Vec2(std::cos(a), std::sin(a)));
      if (!s.observable) continue;
      Vec2 n = s.n;
      const bool is_outlier = unit(rng) < noise.outlier_fraction;
      if (is_outlier) {
        const double scale = std::max(u.norm(), 1.0 / k.fx);
        const double b = angle(rng);
        n = (0.1 + 1.9 * unit(rng)) * scale * Vec2(std::cos(b), std::sin(b));
      } else if (noise.sigma_px > 0.0) {
        n += Vec2(sigma_cal.x() * gauss(rng), sigma_cal.y() * gauss(rng));
      }
      ds.observations[i] = NormalFlowObs(p, n, t);
      ds.pixels[i] = px;
      ds.depths[i] = *z;
      ds.full_flows[i] = u;
      ds.velocities[i] = v;
      outlier[i] = is_outlier;
      return;
    }
    failed[i] = 1;
  };

  const unsigned nthreads = std::max(1u, opts.threads);
  if (nthreads == 1) {
    for (std::size_t i = 0; i < count; ++i) draw(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nthreads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < count; i += nthreads) draw(i);
      });
    for (auto& th : pool) th.join();
  }
  if (std::find(failed.begin(), failed.end(), 1) != failed.end())
    throw Error(ErrorCode::InvalidArgument, "scene is not visible from the camera");
  ds.outlier.assign(outlier.begin(), outlier.end());

  if (const auto* c = std::get_if<ConstantMotion>(&motion)) {
    ds.constant_velocity = c->velocity;
    if (const auto* pl = std::get_if<PlaneScene>(&scene))
      ds.homography = differential_homography(c->velocity.omega, c->velocity.nu / pl->distance, pl->normal);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Time surfaces of moving edges

/// Straight image edge at the start of the window: the line through
/// `point_px` with unit normal `normal`.
struct ImageEdge {
  Vec2 point_px = Vec2::Zero();
  Vec2 normal = Vec2::UnitX();
};

/// Pixel-space motion field induced by a scene and a velocity. Random-point
/// scenes use their mid depth everywhere.
inline Vec2 pixel_flow(const SceneSpec& scene, const Velocity& v, const Intrinsics& k, const Vec2& px) {
  const CalibratedPoint p{(px.x() - k.cx) / k.fx, (px.y() - k.cy) / k.fy};
  const auto z = scene_depth<std::mt19937_64>(scene, p, nullptr);
  if (!z) return Vec2::Zero();
  return flow_to_pixel(ground_truth_flow(p, *z, v), k);
}

struct SurfaceSynthesisOptions {
  int steps = 64;
  int refine_iterations = 50;
};

/// Latest time in (begin, end] at which any edge, transported by the
/// (frozen-in-time) motion field, crosses each pixel centre. The result is
/// referenced at window.end. Pixels never crossed stay unfired.
inline TimeSurface synthesize_time_surface(const SceneSpec& scene, const Velocity& v, const Intrinsics& k,
                                           std::span<const ImageEdge> edges, const TimeWindow& window,
                                           const SurfaceSynthesisOptions& opts = {}) {
  validate(scene);
  k.validate();
  if (!(window.end > window.begin)) throw Error(ErrorCode::InvalidArgument, "empty time window");
  TimeSurface ts(k.width, k.height, window.end);
  const double span = window.end - window.begin;
  const double h = span / opts.steps;
  auto flow = [&](const Vec2& q) { return pixel_flow(scene, v, k, q); };
  // Backward transport: the material point at pixel p at time begin + s was
  // at q(s) when the window opened.
  auto rk4 = [&](const Vec2& q, double step) {
    const Vec2 k1 = -flow(q);
    const Vec2 k2 = -flow(q + 0.5 * step * k1);
    const Vec2 k3 = -flow(q + 0.5 * step * k2);
    const Vec2 k4 = -flow(q + step * k3);
    return Vec2(q + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  };

  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      double latest = TimeSurface::kUnfired;
      for (const auto& e : edges) {
        const Vec2 nrm = e.normal.normalized();
        auto dist = [&](const Vec2& q) { return nrm.dot(q - e.point_px); };
        Vec2 q(x, y);
        double d_prev = dist(q);
        std::optional<std::pair<Vec2, int>> last;  // state at the start of the last bracketing step
        for (int s = 0; s < opts.steps; ++s) {
          const Vec2 q_next = rk4(q, h);
          const double d_next = dist(q_next);
          if ((d_prev > 0.0 && d_next <= 0.0) || (d_prev < 0.0 && d_next >= 0.0) || (d_prev == 0.0 && s > 0))
            last = {q, s};
          q = q_next;
          d_prev = d_next;
        }
        if (!last) continue;
        const auto [q0, s0] = *last;
        double lo = 0.0;
        double hi = h;
        const double d0 = dist(q0);
        if (d0 == 0.0) hi = 0.0;
        for (int it = 0; it < opts.refine_iterations && hi > 0.0; ++it) {
          const double mid = 0.5 * (lo + hi);
          const double dm = dist(rk4(q0, mid));
          if ((d0 > 0.0) == (dm > 0.0) && dm != 0.0) lo = mid;
          else hi = mid;
        }
        const double t = window.begin + s0 * h + 0.5 * (lo + hi);
        if (t > window.begin && t <= window.end) latest = std::max(latest, t);
      }
      if (latest != TimeSurface::kUnfired) ts.set(x, y, latest, 1);
    }
  }
  return ts;
}

/// Events (one per fired pixel) reproducing a synthesized surface.
inline std::vector<Event> surface_events(const TimeSurface& ts) {
  std::vector<Event> ev;
  for (int y = 0; y < ts.height(); ++y)
    for (int x = 0; x < ts.width(); ++x)
      if (ts.fired(x, y)) ev.push_back({ts.at(x, y), x, y, ts.polarity(x, y) < 0 ? -1 : 1});
  std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return ev;
}

// ---------------------------------------------------------------------------
// Global-flow registration

struct ToyRegistration {
  Vec2 constraint = Vec2::Zero();  // argmin sum (n^T u - |n|^2)^2
  Vec2 naive = Vec2::Zero();       // argmin sum |n - u|^2
};

/// Recovers a single global flow from normal flows, with the constraint
/// (O = I) and with the naive substitution n ~ u for comparison.
inline ToyRegistration toy_registration(std::span<const Vec2> normal_flows) {
  ToyRegistration out;
  if (normal_flows.empty()) throw Error(ErrorCode::TooFewObservations, "no normal flows");
  const bool all_zero =
      std::all_of(normal_flows.begin(), normal_flows.end(), [](const Vec2& n) { return n.squaredNorm() == 0.0; });
  if (all_zero) return out;
  if (normal_flows.size() < 2) throw Error(ErrorCode::RankDeficient, "one normal flow fixes one flow component");
  Eigen::MatrixXd a(normal_flows.size(), 2);
  Eigen::VectorXd b(normal_flows.size());
  Vec2 sum = Vec2::Zero();
  for (std::size_t i = 0; i < normal_flows.size(); ++i) {
    a.row(i) = normal_flows[i].transpose();
    b(i) = normal_flows[i].squaredNorm();
    sum += normal_flows[i];
  }
  out.constraint = stack_and_solve(a, b, 2).theta;
  out.naive = sum / static_cast<double>(normal_flows.size());
  return out;
}

/// Normal flows of a global flow observed at the given gradient angles (rad).
inline std::vector<Vec2> toy_normal_flows(const Vec2& u, std::span<const double> angles) {
  std::vector<Vec2> n;
  for (double a : angles) n.push_back(sample_normal_flow(u, Vec2(std::cos(a), std::sin(a))).n);
  return n;
}

}  // namespace evnf
