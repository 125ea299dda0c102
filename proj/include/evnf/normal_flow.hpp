#pragma once

// Normal flow from a time surface by robust local plane fitting. The time
// surface gradient g (s/px) gives the normal flow n = g / |g|^2.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "evnf/error.hpp"
#include "evnf/events.hpp"
#include "evnf/geometry.hpp"
#include "evnf/rng.hpp"

namespace evnf {

struct ExtractionConfig {
  int spatial_window = 7;           // px, odd
  double temporal_window = 0.04;    // s
  double plane_ransac_thresh = 1e-5;  // s
  double max_flow = 1e4;            // px/s
  double min_gradient = 1e-4;       // s/px
  int min_support = 10;
  int ransac_iterations = 50;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (spatial_window < 3 || spatial_window % 2 == 0)
      throw Error(ErrorCode::InvalidArgument, "spatial window must be odd and >= 3");
    if (!(temporal_window > 0.0) || !(plane_ransac_thresh > 0.0) || !(max_flow > 0.0) || !(min_gradient > 0.0))
      throw Error(ErrorCode::InvalidArgument, "extraction thresholds must be positive");
    if (min_support < 3) throw Error(ErrorCode::InvalidArgument, "minimum support must be at least 3");
    if (ransac_iterations <= 0) throw Error(ErrorCode::InvalidArgument, "plane RANSAC needs iterations");
  }

  /// Smallest admissible gradient norm, combining the explicit floor and the
  /// flow cap.
  double gradient_floor() const { return std::max(min_gradient, 1.0 / max_flow); }
};

struct PlaneFit {
  Vec2 gradient = Vec2::Zero();  // s/px
  double offset = 0.0;           // s, plane value at the centre pixel
  int inlier_count = 0;
  double rms = 0.0;  // s
};

namespace detail {

struct PatchSample {
  double dx;
  double dy;
  double dt;
};

inline std::optional<Eigen::Vector3d> plane_through(const PatchSample& a, const PatchSample& b,
                                                    const PatchSample& c) {
  Eigen::Matrix3d m;
  m << a.dx, a.dy, 1.0, b.dx, b.dy, 1.0, c.dx, c.dy, 1.0;
  // Twice the triangle area; zero when the three pixels are collinear.
  const double area2 = (b.dx - a.dx) * (c.dy - a.dy) - (b.dy - a.dy) * (c.dx - a.dx);
  if (std::abs(area2) < 1e-9) return std::nullopt;
  return m.partialPivLu().solve(Eigen::Vector3d(a.dt, b.dt, c.dt));
}

inline double plane_error(const Eigen::Vector3d& p, const PatchSample& s) {
  return std::abs(p(0) * s.dx + p(1) * s.dy + p(2) - s.dt);
}

inline bool collinear(const std::vector<PatchSample>& pts) {
  if (pts.size() < 3) return true;
  double mx = 0.0, my = 0.0;
  for (const auto& s : pts) {
    mx += s.dx;
    my += s.dy;
  }
  mx /= pts.size();
  my /= pts.size();
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (const auto& s : pts) {
    sxx += (s.dx - mx) * (s.dx - mx);
    syy += (s.dy - my) * (s.dy - my);
    sxy += (s.dx - mx) * (s.dy - my);
  }
  return sxx * syy - sxy * sxy <= 1e-9 * std::max(1.0, (sxx + syy) * (sxx + syy));
}

inline Eigen::Vector3d least_squares_plane(const std::vector<PatchSample>& pts, const std::vector<int>& idx) {
  Eigen::MatrixXd a(idx.size(), 3);
  Eigen::VectorXd b(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& s = pts[idx[r]];
    a.row(r) << s.dx, s.dy, 1.0;
    b(r) = s.dt;
  }
  return a.colPivHouseholderQr().solve(b);
}

inline std::vector<int> plane_inliers(const std::vector<PatchSample>& pts, const Eigen::Vector3d& plane,
                                      double thresh) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(pts.size()); ++i)
    if (plane_error(plane, pts[i]) <= thresh) idx.push_back(i);
  return idx;
}

}  // namespace detail

/// Fits t = a dx + b dy + c around pixel (cx, cy): 3-point RANSAC followed by
/// a least-squares refit on the consensus set.
inline PlaneFit fit_local_plane(const TimeSurface& ts, int cx, int cy, const ExtractionConfig& cfg,
                                std::uint64_t stream = 0) {
  if (!ts.contains(cx, cy) || !ts.fired(cx, cy))
    throw Error(ErrorCode::InsufficientSupport, "centre pixel has not fired");
  const int half = cfg.spatial_window / 2;
  const double t_c = ts.at(cx, cy);

  std::vector<detail::PatchSample> pts;
  pts.reserve(static_cast<std::size_t>(cfg.spatial_window) * cfg.spatial_window);
  for (int y = cy - half; y <= cy + half; ++y) {
    for (int x = cx - half; x <= cx + half; ++x) {
      if (!ts.contains(x, y) || !ts.fired(x, y)) continue;
      const double dt = ts.at(x, y) - t_c;
      if (std::abs(dt) > cfg.temporal_window) continue;
      pts.push_back({double(x - cx), double(y - cy), dt});
    }
  }
  if (pts.size() < 3) throw Error(ErrorCode::InsufficientSupport, "fewer than 3 fired pixels in the window");
  if (detail::collinear(pts)) throw Error(ErrorCode::DegenerateConfiguration, "fired pixels are collinear");
  if (static_cast<int>(pts.size()) < cfg.min_support)
    throw Error(ErrorCode::InsufficientSupport,
                std::to_string(pts.size()) + " fired pixels, need " + std::to_string(cfg.min_support));

  auto rng = make_stream(cfg.seed, stream);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pts.size()) - 1);
  std::vector<int> best;
  for (int it = 0; it < cfg.ransac_iterations; ++it) {
    const int i = pick(rng);
    int j = pick(rng);
    while (j == i) j = pick(rng);
    int k = pick(rng);
    while (k == i || k == j) k = pick(rng);
    const auto plane = detail::plane_through(pts[i], pts[j], pts[k]);
    if (!plane) continue;
    auto inl = detail::plane_inliers(pts, *plane, cfg.plane_ransac_thresh);
    if (inl.size() > best.size()) best = std::move(inl);
    if (best.size() == pts.size()) break;
  }
  if (static_cast<int>(best.size()) < cfg.min_support)
    throw Error(ErrorCode::NoPlaneConsensus, "plane consensus below minimum support");

  Eigen::Vector3d plane = detail::least_squares_plane(pts, best);
  for (int round = 0; round < 2; ++round) {
    auto inl = detail::plane_inliers(pts, plane, cfg.plane_ransac_thresh);
    if (inl == best) break;
    std::vector<detail::PatchSample> sub;
    for (int i : inl) sub.push_back(pts[i]);
    if (static_cast<int>(inl.size()) < cfg.min_support || detail::collinear(sub))
      throw Error(ErrorCode::NoPlaneConsensus, "refit lost support");
    best = std::move(inl);
    plane = detail::least_squares_plane(pts, best);
  }

  double sse = 0.0;
  for (int i : best) sse += std::pow(detail::plane_error(plane, pts[i]), 2);
  PlaneFit fit;
  fit.gradient = plane.head<2>();
  fit.offset = plane(2) + t_c;
  fit.inlier_count = static_cast<int>(best.size());
  fit.rms = std::sqrt(sse / best.size());
  if (fit.rms > cfg.plane_ransac_thresh) throw Error(ErrorCode::NoPlaneConsensus, "refit rms above threshold");
  return fit;
}

/// n = g / |g|^2. Units follow the gradient: s/px in, px/s out.
inline Vec2 normal_flow_from_gradient(const Vec2& g, double min_gradient = 1e-4) {
  const double norm2 = g.squaredNorm();
  if (!(norm2 > 0.0) || std::sqrt(norm2) < min_gradient)
    throw Error(ErrorCode::BelowMinGradient, "time-surface gradient too flat");
  return g / norm2;
}

struct ExtractedFlow {
  NormalFlowObs obs;
  Vec2 pixel = Vec2::Zero();
  Vec2 gradient_px = Vec2::Zero();
  int inliers = 0;
  double rms = 0.0;
};

struct ExtractionResult {
  std::vector<ExtractedFlow> flows;  // ordered by pixel index
  std::size_t attempted = 0;
  std::map<std::string, std::size_t> rejected;  // reason -> count
};

/// Attempts a plane fit at every fired pixel. Per-pixel failures are counted
/// by reason and skipped. Output is independent of `cfg.threads`.
inline ExtractionResult extract_normal_flows(const TimeSurface& ts, const Intrinsics& k,
                                             const ExtractionConfig& cfg = {}) {
  cfg.validate();
  k.validate();
  if (ts.width() > 0 && (ts.width() != k.width || ts.height() != k.height))
    throw Error(ErrorCode::InvalidArgument, "time surface and intrinsics disagree on sensor size");

  const std::size_t npix = static_cast<std::size_t>(ts.width()) * ts.height();
  std::vector<std::optional<ExtractedFlow>> slots(npix);
  std::vector<std::optional<ErrorCode>> failures(npix);
  const double floor = cfg.gradient_floor();

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const int x = static_cast<int>(idx % ts.width());
      const int y = static_cast<int>(idx / ts.width());
      if (!ts.fired(x, y)) continue;
      try {
        const PlaneFit fit = fit_local_plane(ts, x, y, cfg, idx);
        normal_flow_from_gradient(fit.gradient, floor);
        const auto cal = pixel_to_calibrated(Vec2(x, y), fit.gradient, k);
        ExtractedFlow f;
        f.obs = NormalFlowObs(cal.point, cal.gradient / cal.gradient.squaredNorm(), ts.at(x, y));
        f.pixel = Vec2(x, y);
        f.gradient_px = fit.gradient;
        f.inliers = fit.inlier_count;
        f.rms = fit.rms;
        slots[idx] = f;
      } catch (const Error& e) {
        failures[idx] = e.code();
      }
    }
  };

  const unsigned nthreads = std::max(1u, cfg.threads);
  if (nthreads == 1 || npix < 1024) {
    work(0, npix);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (npix + nthreads - 1) / nthreads;
    for (unsigned t = 0; t < nthreads; ++t) {
      const std::size_t b = std::min(npix, t * chunk);
      const std::size_t e = std::min(npix, b + chunk);
      pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }

  ExtractionResult out;
  for (std::size_t idx = 0; idx < npix; ++idx) {
    if (slots[idx]) {
      ++out.attempted;
      out.flows.push_back(*slots[idx]);
    } else if (failures[idx]) {
      ++out.attempted;
      ++out.rejected[std::string(to_string(*failures[idx]))];
    }
  }
  return out;
}

}  // namespace evnf
