#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "evnf/normal_flow.hpp"
#include "evnf/synthesis.hpp"

using namespace evnf;

namespace {

ErrorCode fit_error(const TimeSurface& ts, int x, int y, const ExtractionConfig& cfg = {}) {
  try {
    fit_local_plane(ts, x, y, cfg);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "plane fit unexpectedly succeeded";
  return ErrorCode::NumericalFailure;
}

/// Fronto-parallel plane translating sideways so that the image flow is
/// `speed_px` px/s along +x everywhere.
Velocity sideways(double speed_px, const Intrinsics& k, double distance) {
  return {Vec3(-speed_px / k.fx * distance, 0, 0), Vec3::Zero()};
}

}  // namespace

TEST(PlaneFit, ExactPlaneRecovered) {
  TimeSurface ts(20, 20, 1.0);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) ts.set(x, y, 0.5 + 0.01 * x);
  const auto fit = fit_local_plane(ts, 10, 10, {});
  EXPECT_NEAR(fit.gradient.x(), 0.01, 1e-12);
  EXPECT_NEAR(fit.gradient.y(), 0.0, 1e-12);
  EXPECT_NEAR(fit.offset, 0.6, 1e-12);
  EXPECT_EQ(fit.inlier_count, 49);
  EXPECT_LE(fit.rms, 1e-12);
}

TEST(PlaneFit, TiltedPlaneAndOutlierRejected) {
  TimeSurface ts(20, 20, 1.0);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) ts.set(x, y, 0.4 + 0.003 * x - 0.002 * y);
  ts.set(11, 9, 0.2);  // stale pixel
  ts.set(8, 12, 0.41);
  const auto fit = fit_local_plane(ts, 10, 10, {});
  EXPECT_NEAR(fit.gradient.x(), 0.003, 1e-12);
  EXPECT_NEAR(fit.gradient.y(), -0.002, 1e-12);
  EXPECT_EQ(fit.inlier_count, 47);  // stale pixel is outside the temporal window
}

TEST(PlaneFit, FlatSurfaceGivesZeroGradient) {
  TimeSurface ts(10, 10, 1.0);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) ts.set(x, y, 0.7);
  const auto fit = fit_local_plane(ts, 5, 5, {});
  EXPECT_LT(fit.gradient.norm(), 1e-15);
  EXPECT_THROW(normal_flow_from_gradient(fit.gradient), Error);
}

TEST(PlaneFit, CollinearPixelsAreDegenerate) {
  TimeSurface ts(10, 10, 1.0);
  ts.set(4, 5, 0.99);
  ts.set(5, 5, 0.995);
  ts.set(6, 5, 1.0);
  EXPECT_EQ(fit_error(ts, 5, 5), ErrorCode::DegenerateConfiguration);
}

TEST(PlaneFit, InsufficientSupport) {
  TimeSurface ts(10, 10, 1.0);
  EXPECT_EQ(fit_error(ts, 5, 5), ErrorCode::InsufficientSupport);
  ts.set(5, 5, 1.0);
  ts.set(6, 5, 1.0);
  EXPECT_EQ(fit_error(ts, 5, 5), ErrorCode::InsufficientSupport);
  ts.set(5, 6, 1.0);
  ts.set(6, 6, 1.0);
  EXPECT_EQ(fit_error(ts, 5, 5), ErrorCode::InsufficientSupport);  // 4 < 10
}

TEST(PlaneFit, TemporalWindowExcludesOldPixels) {
  TimeSurface ts(20, 20, 1.0);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) ts.set(x, y, x < 10 ? 0.5 : 1.0);
  const auto fit = fit_local_plane(ts, 12, 10, {});
  EXPECT_EQ(fit.inlier_count, 42);  // column 9 is 0.5 s older
  EXPECT_LT(fit.gradient.norm(), 1e-15);
}

TEST(NormalFlowFromGradient, Arithmetic) {
  EXPECT_LT((normal_flow_from_gradient(Vec2(0.5, 0)) - Vec2(2, 0)).norm(), 1e-15);
  EXPECT_LT((normal_flow_from_gradient(Vec2(0.1, 0.1)) - Vec2(5, 5)).norm(), 1e-12);
  try {
    normal_flow_from_gradient(Vec2::Zero());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BelowMinGradient);
  }
  EXPECT_THROW(normal_flow_from_gradient(Vec2(5e-5, 0)), Error);
}

TEST(NormalFlowFromGradient, DirectionAndMagnitudeLaws) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (int i = 0; i < 1000; ++i) {
    const Vec2 g(u(rng), u(rng));
    if (g.norm() < 1e-3) continue;
    const Vec2 n = normal_flow_from_gradient(g);
    EXPECT_NEAR(n.norm() * g.norm(), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(n.x() * g.y() - n.y() * g.x()), 0.0, 1e-12 * n.norm() * g.norm());
    EXPECT_GT(n.dot(g), 0.0);
  }
}

TEST(ExtractionConfig, DefaultsAndValidation) {
  const ExtractionConfig cfg;
  EXPECT_EQ(cfg.spatial_window, 7);
  EXPECT_EQ(cfg.temporal_window, 0.04);
  EXPECT_EQ(cfg.plane_ransac_thresh, 1e-5);
  EXPECT_EQ(cfg.min_support, 10);
  EXPECT_EQ(cfg.ransac_iterations, 50);
  EXPECT_NO_THROW(cfg.validate());
  ExtractionConfig bad;
  bad.spatial_window = 6;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.min_gradient = 0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Extraction, EmptySurface) {
  const Intrinsics k;
  const auto r = extract_normal_flows(TimeSurface(k.width, k.height, 0.0), k);
  EXPECT_TRUE(r.flows.empty());
  EXPECT_EQ(r.attempted, 0u);
}

TEST(Extraction, TranslatingEdgeMatchesSimulator) {
  const Intrinsics k;
  const PlaneScene scene{Vec3::UnitZ(), 3.0};
  const Velocity v = sideways(100.0, k, scene.distance);
  ASSERT_LT((pixel_flow(scene, v, k, Vec2(7, 150)) - Vec2(100, 0)).norm(), 1e-9);
  const std::vector<ImageEdge> edges{{Vec2(20, 0), Vec2(1, 0)}};
  const auto ts = synthesize_time_surface(scene, v, k, edges, {0.0, 0.5});
  const auto r = extract_normal_flows(ts, k);
  ASSERT_GT(r.flows.size(), 1000u);
  const Vec2 expect(100.0 / k.fx, 0.0);
  for (const auto& f : r.flows) {
    EXPECT_LT((f.obs.n - expect).norm(), 0.02 * expect.norm());
    const Vec2 g_cal(k.fx * f.gradient_px.x(), k.fy * f.gradient_px.y());
    EXPECT_NEAR(f.obs.n.norm() * g_cal.norm(), 1.0, 1e-9);
    EXPECT_NEAR(f.obs.n.x() * g_cal.y() - f.obs.n.y() * g_cal.x(), 0.0, 1e-9 * f.obs.n.norm() * g_cal.norm());
    EXPECT_EQ(f.obs.t, ts.at(static_cast<int>(f.pixel.x()), static_cast<int>(f.pixel.y())));
  }
}

TEST(Extraction, OutputIndependentOfThreadCount) {
  const Intrinsics k;
  const PlaneScene scene{Vec3::UnitZ(), 3.0};
  // Near-uniform flow keeps the surface planar at the 1e-5 s threshold.
  const Velocity v{Vec3(-2.0, 1.0, 0.0), Vec3(0.0, 0.0, 0.01)};
  const std::vector<ImageEdge> edges{{Vec2(60, 40), Vec2(1, 0.3)}, {Vec2(150, 120), Vec2(-0.2, 1)}};
  auto ts = synthesize_time_surface(scene, v, k, edges, {0.0, 0.3});
  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.0, 2e-6);
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x)
      if (ts.fired(x, y)) ts.set(x, y, ts.at(x, y) + noise(rng));
  ExtractionConfig c1;
  c1.seed = 9;
  auto c4 = c1;
  c4.threads = 4;
  const auto a = extract_normal_flows(ts, k, c1);
  const auto b = extract_normal_flows(ts, k, c4);
  ASSERT_EQ(a.flows.size(), b.flows.size());
  EXPECT_GT(a.flows.size(), 100u);
  for (std::size_t i = 0; i < a.flows.size(); ++i) {
    EXPECT_EQ(a.flows[i].pixel, b.flows[i].pixel);
    EXPECT_EQ(a.flows[i].obs.n, b.flows[i].obs.n);
    EXPECT_EQ(a.flows[i].inliers, b.flows[i].inliers);
  }
  EXPECT_EQ(a.rejected, b.rejected);
  for (std::size_t i = 1; i < a.flows.size(); ++i) {
    const auto& p = a.flows[i - 1].pixel;
    const auto& q = a.flows[i].pixel;
    EXPECT_LT(p.y() * k.width + p.x(), q.y() * k.width + q.x());
  }
}

TEST(Extraction, ResidualStatisticsFollowTimestampNoise) {
  const Intrinsics k;
  const PlaneScene scene{Vec3::UnitZ(), 3.0};
  const Velocity v = sideways(100.0, k, scene.distance);
  const std::vector<ImageEdge> edges{{Vec2(20, 0), Vec2(1, 0)}};
  auto ts = synthesize_time_surface(scene, v, k, edges, {0.0, 0.6});
  const double sigma = 1e-6;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> noise(0.0, sigma);
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x)
      if (ts.fired(x, y)) ts.set(x, y, ts.at(x, y) + noise(rng));
  const auto r = extract_normal_flows(ts, k);
  const Vec2 u(100.0 / k.fx, 0.0);
  // Relative residual (n^T u - |n|^2)/|n|^2 equals g_px . u_px - 1, whose
  // spread for a full 7x7 least-squares window is 100 * sigma / sqrt(196).
  std::vector<double> rel;
  for (const auto& f : r.flows) {
    const int x = static_cast<int>(f.pixel.x());
    const int y = static_cast<int>(f.pixel.y());
    if (x < 26 || x > 74 || y < 3 || y > k.height - 4 || f.inliers != 49) continue;
    rel.push_back(nf_residual(f.obs, u) / f.obs.mag2);
  }
  ASSERT_GT(rel.size(), 3000u);
  double mean = 0.0;
  for (double e : rel) mean += e;
  mean /= rel.size();
  double var = 0.0;
  for (double e : rel) var += (e - mean) * (e - mean);
  const double sd = std::sqrt(var / (rel.size() - 1));
  const double predicted = 100.0 * sigma / 14.0;
  EXPECT_LT(std::abs(mean), 4.0 * sd / std::sqrt(static_cast<double>(rel.size())));
  EXPECT_GT(sd, 0.8 * predicted);
  EXPECT_LT(sd, 1.25 * predicted);
}

TEST(Extraction, FlickeringStripesAreRejected) {
  const Intrinsics k{200, 200, 30, 30, 60, 60};
  TimeSurface ts(k.width, k.height, 1.0);
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) ts.set(x, y, x % 2 == 0 ? 1.0 : 0.98);
  const auto r = extract_normal_flows(ts, k);
  EXPECT_EQ(r.attempted, static_cast<std::size_t>(k.width * k.height));
  EXPECT_GT(static_cast<double>(r.attempted - r.flows.size()) / r.attempted, 0.9);
}

TEST(Extraction, RejectsMismatchedSensor) {
  const Intrinsics k;
  EXPECT_THROW(extract_normal_flows(TimeSurface(10, 10, 0.0), k), Error);
}
