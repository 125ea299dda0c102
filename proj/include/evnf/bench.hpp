#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "evnf/homography.hpp"
#include "evnf/linear_solvers.hpp"
#include "evnf/rng.hpp"
#include "evnf/synthesis.hpp"

namespace evnf {

struct NoiseSweepConfig {
  ModelKind kind = ModelKind::AngularVelocity;
  std::vector<double> grid{0.01, 0.1, 1.0, 10.0, 100.0};  // px/s per component
  int trials = 20;
  std::size_t observations = 500;
  std::uint64_t seed = 0;
  Intrinsics intrinsics;

  void validate() const {
    if (grid.empty()) throw Error(ErrorCode::InvalidArgument, "noise grid is empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!(grid[i] >= 0.0) || !std::isfinite(grid[i]))
        throw Error(ErrorCode::InvalidArgument, "noise levels must be finite and non-negative");
      if (i > 0 && !(grid[i] > grid[i - 1]))
        throw Error(ErrorCode::InvalidArgument, "noise grid must be strictly increasing");
    }
    if (trials <= 0) throw Error(ErrorCode::InvalidArgument, "trials must be positive");
    if (observations < static_cast<std::size_t>(minimal_sample_size(kind)) || observations == 0)
      throw Error(ErrorCode::InvalidArgument, "too few observations per trial");
    intrinsics.validate();
  }
};

struct NoiseSweepRow {
  double noise_px = 0.0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  int failures = 0;  // trials whose solve threw
};

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct TrialSetup {
  SceneSpec scene;
  Velocity velocity;
};

/// Unit-speed rotation and translation in random directions; planar kinds
/// look at a plane tilted at most 60 degrees from fronto-parallel.
inline TrialSetup trial_setup(ModelKind kind, std::uint64_t seed) {
  auto rng = make_stream(seed, 0xbe9c);
  std::normal_distribution<double> g(0.0, 1.0);
  auto dir = [&] { return Vec3(g(rng), g(rng), g(rng)).normalized(); };
  TrialSetup s{RandomPointsScene{}, {dir(), dir()}};
  if (kind == ModelKind::AngularVelocity) s.velocity.nu.setZero();
  if (kind == ModelKind::DiffHomographyLinear) {
    Vec3 n = dir();
    if (n.z() < 0.0) n = -n;
    if (n.z() < 0.5) n = (n + Vec3::UnitZ()).normalized();
    s.scene = PlaneScene{n, 3.0};
  }
  return s;
}

/// Relative error of one trial; per-observation kinds report the median over
/// the observations that could be solved.
inline double trial_error(ModelKind kind, const Dataset& ds) {
  switch (kind) {
    case ModelKind::AngularVelocity: {
      const Vec3 w = solve_angular_velocity(ds.observations);
      return (w - ds.constant_velocity->omega).norm() / ds.constant_velocity->omega.norm();
    }
    case ModelKind::SixDof: {
      const Vec6 th = solve_6dof(ds.observations, ds.depths).stacked();
      const Vec6 truth = ds.constant_velocity->stacked();
      return (th - truth).norm() / truth.norm();
    }
    case ModelKind::DiffHomographyLinear: {
      const Mat3 h = recover_true_Hd(solve_diff_homography(ds.observations)).h_d;
      return (h - *ds.homography).norm() / ds.homography->norm();
    }
    case ModelKind::OpticalFlow:
    case ModelKind::Depth: {
      std::vector<double> errs;
      for (std::size_t i = 0; i < ds.observations.size(); ++i) {
        try {
          if (kind == ModelKind::OpticalFlow) {
            const Vec2 u = solve_optical_flow(ds.observations[i], ds.velocities[i]);
            errs.push_back((u - ds.full_flows[i]).norm() / ds.full_flows[i].norm());
          } else {
            const double z = solve_depth(ds.observations[i], ds.velocities[i]).depth;
            errs.push_back(std::abs(z - ds.depths[i]) / ds.depths[i]);
          }
        } catch (const Error&) {
        }
      }
      if (errs.empty()) throw Error(ErrorCode::NumericalFailure, "no observation could be solved");
      return quantile(std::move(errs), 0.5);
    }
  }
  throw Error(ErrorCode::InvalidArgument, "unknown model kind");
}

}  // namespace detail

/// Median and quartiles of the relative parameter error per noise level.
/// Trial j uses the same scene, motion and sample geometry at every level,
/// so the curves differ only through the injected noise.
inline std::vector<NoiseSweepRow> noise_sweep(const NoiseSweepConfig& cfg) {
  cfg.validate();
  std::vector<NoiseSweepRow> rows;
  for (double sigma : cfg.grid) {
    NoiseSweepRow row{sigma, 0.0, 0.0, 0.0, 0};
    std::vector<double> errs;
    for (int j = 0; j < cfg.trials; ++j) {
      const std::uint64_t s = derive_seed(cfg.seed, static_cast<std::uint64_t>(j));
      const auto setup = detail::trial_setup(cfg.kind, s);
      const auto ds = generate_dataset(setup.scene, ConstantMotion{setup.velocity}, cfg.intrinsics, cfg.observations,
                                       TimeWindow{}, NoiseSpec{sigma, 0.0, s});
      try {
        errs.push_back(detail::trial_error(cfg.kind, ds));
      } catch (const Error&) {
        ++row.failures;
      }
    }
    if (errs.empty()) throw Error(ErrorCode::NumericalFailure, "every trial failed at one noise level");
    row.median = detail::quantile(errs, 0.5);
    row.q25 = detail::quantile(errs, 0.25);
    row.q75 = detail::quantile(std::move(errs), 0.75);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace evnf
