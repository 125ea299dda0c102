// Acceptance suite: one PASS/FAIL line per criterion. With no arguments all
// criteria run; otherwise only the listed ids. Exit status is non-zero when a
// gating criterion that ran has failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evnf/evnf.hpp"

using namespace evnf;

namespace {

const Intrinsics kCam{200.0, 200.0, 120.0, 90.0, 240, 180};

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  bool gating;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

Vec3 random_dir(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  return Vec3(g(rng), g(rng), g(rng)).normalized();
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

double rel(const Eigen::VectorXd& est, const Eigen::VectorXd& truth) { return (est - truth).norm() / truth.norm(); }

// ---------------------------------------------------------------------------
// 1. Exact inversion

Outcome exact_inversion() {
  constexpr int kInstances = 100;
  constexpr double kTol = 1e-8;
  std::ostringstream detail;
  bool pass = true;
  for (auto kind : {ModelKind::OpticalFlow, ModelKind::Depth, ModelKind::AngularVelocity, ModelKind::SixDof,
                    ModelKind::DiffHomographyLinear}) {
    double worst = 0.0;
    int solved = 0;
    int skipped = 0;
    for (int s = 0; s < kInstances; ++s) {
      std::mt19937_64 rng(1000 + s);
      Velocity v{uniform(rng, 0.2, 2.0) * random_dir(rng), uniform(rng, 0.2, 2.0) * random_dir(rng)};
      SceneSpec scene = RandomPointsScene{};
      if (kind == ModelKind::AngularVelocity) v.nu.setZero();
      if (kind == ModelKind::DiffHomographyLinear) {
        Vec3 n = random_dir(rng);
        if (n.z() < 0.0) n = -n;
        if (n.z() < 0.5) n = (n + Vec3::UnitZ()).normalized();
        scene = PlaneScene{n, uniform(rng, 2.0, 5.0)};
      }
      const std::size_t count = is_batch_model(kind) ? 100 : 20;
      const auto ds = generate_dataset(scene, ConstantMotion{v}, kCam, count, TimeWindow{}, NoiseSpec{0.0, 0.0,
                                                                                                     static_cast<std::uint64_t>(s)});
      auto record = [&](double e) {
        worst = std::max(worst, e);
        ++solved;
      };
      try {
        switch (kind) {
          case ModelKind::AngularVelocity: record(rel(solve_angular_velocity(ds.observations), v.omega)); break;
          case ModelKind::SixDof: record(rel(solve_6dof(ds.observations, ds.depths).stacked(), v.stacked())); break;
          case ModelKind::DiffHomographyLinear: {
            const Mat3 h = recover_true_Hd(solve_diff_homography(ds.observations)).h_d;
            record((h - *ds.homography).norm() / ds.homography->norm());
            break;
          }
          case ModelKind::OpticalFlow:
          case ModelKind::Depth:
            for (std::size_t i = 0; i < ds.observations.size(); ++i) {
              try {
                if (kind == ModelKind::OpticalFlow)
                  record(rel(solve_optical_flow(ds.observations[i], v), ds.full_flows[i]));
                else
                  record(std::abs(solve_depth(ds.observations[i], v).depth - ds.depths[i]) / ds.depths[i]);
              } catch (const Error&) {
                ++skipped;
              }
            }
            break;
        }
      } catch (const Error&) {
        ++skipped;
      }
    }
    const bool ok = worst <= kTol && solved > 0;
    pass = pass && ok;
    detail << to_string(kind) << fmt(" max %.2e (%d solved, %d rank-deficient); ", worst, solved, skipped);
  }
  return {pass, detail.str()};
}

// ---------------------------------------------------------------------------
// 2. Numerical-stability sweep

// 99th percentile of the 20-trial median over 200 batches of an independent
// Monte-Carlo oracle (oracle::rotation_noise_median, batch seeds 2024..2223).
constexpr double kFrozenRotationMedianAt1px = 1.55e-3;
constexpr std::uint64_t kSweepSeed = 42;

Outcome noise_sweep_criterion() {
  std::ostringstream detail;
  bool pass = true;
  double rotation_at_1px = std::numeric_limits<double>::quiet_NaN();
  for (auto kind : {ModelKind::OpticalFlow, ModelKind::Depth, ModelKind::AngularVelocity, ModelKind::SixDof,
                    ModelKind::DiffHomographyLinear}) {
    NoiseSweepConfig cfg;
    cfg.kind = kind;
    cfg.seed = kSweepSeed;
    cfg.intrinsics = kCam;
    const auto rows = noise_sweep(cfg);
    bool monotone = true;
    for (std::size_t i = 1; i < rows.size(); ++i) monotone = monotone && rows[i].median >= rows[i - 1].median;
    pass = pass && monotone;
    detail << to_string(kind) << (monotone ? " monotone" : " NOT monotone") << " [";
    for (std::size_t i = 0; i < rows.size(); ++i) detail << (i ? " " : "") << fmt("%.2e", rows[i].median);
    detail << "]; ";
    if (kind == ModelKind::AngularVelocity)
      for (const auto& r : rows)
        if (r.noise_px == 1.0) rotation_at_1px = r.median;
  }
  const bool under = rotation_at_1px <= kFrozenRotationMedianAt1px;
  detail << fmt("angular_velocity at 1 px %.3e vs frozen %.3e", rotation_at_1px, kFrozenRotationMedianAt1px);
  return {pass && under, detail.str()};
}

// ---------------------------------------------------------------------------
// 3. Toy registration

Outcome toy_registration_criterion() {
  const Vec2 u(1.732, -1.0);
  // A triangle's three edge normals, several edge pixels each.
  std::vector<double> angles;
  for (int e = 0; e < 3; ++e)
    for (int k = 0; k < 5; ++k) angles.push_back(std::numbers::pi / 2 + e * 2.0 * std::numbers::pi / 3);
  const auto n = toy_normal_flows(u, angles);
  const auto r = toy_registration(n);
  const double ec = (r.constraint - u).norm();
  const double en = (r.naive - u).norm();
  const bool pass = ec <= 1e-6 && en >= 10.0 * ec && en > ec;
  return {pass, fmt("constraint (%.6f, %.6f) err %.2e; naive (%.4f, %.4f) err %.3f", r.constraint.x(),
                    r.constraint.y(), ec, r.naive.x(), r.naive.y(), en)};
}

// ---------------------------------------------------------------------------
// 4. Homography round trip

Outcome homography_criterion() {
  std::mt19937_64 rng(4);
  double worst_recover = 0.0;
  double worst_match = 0.0;
  int rejected = 0;
  for (int i = 0; i < 1000;) {
    const Vec3 w(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    const Vec3 t(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Vec3 n = random_dir(rng);
    if (n.z() < 0.0) n = -n;
    // Valid: visible translation not nearly along the normal.
    if (t.norm() < 0.1 || std::abs(t.normalized().dot(n)) > 0.99) {
      ++rejected;
      continue;
    }
    const double eps = uniform(rng, -10.0, 10.0);
    const Mat3 h = -(skew(w) + t * n.transpose());
    const auto rec = recover_true_Hd(h + eps * Mat3::Identity());
    worst_recover = std::max(worst_recover, (rec.h_d - h).norm());
    const auto d = decompose_Hd(rec.h_d);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : d.candidates) {
      Eigen::Matrix<double, 9, 1> diff;
      diff << c.nu_over_d - t, c.normal - n, c.omega - w;
      best = std::min(best, diff.norm());
    }
    worst_match = std::max(worst_match, best);
    ++i;
  }
  return {worst_recover <= 1e-9 && worst_match <= 1e-8,
          fmt("recover max %.2e; best candidate max %.2e (%d degenerate draws redrawn)", worst_recover, worst_match,
              rejected)};
}

// ---------------------------------------------------------------------------
// 5. RANSAC robustness

Outcome ransac_criterion() {
  std::mt19937_64 rng(7);
  const Vec3 w = random_dir(rng);
  const auto ds = generate_dataset(RandomPointsScene{}, ConstantMotion{{Vec3::Zero(), w}}, kCam, 500, TimeWindow{},
                                   NoiseSpec{0.1, 0.3, 7});
  std::vector<NormalFlowObs> inliers;
  for (std::size_t i = 0; i < ds.observations.size(); ++i)
    if (!ds.outlier[i]) inliers.push_back(ds.observations[i]);
  const double e_inlier = (solve_angular_velocity(inliers) - w).norm();

  // For n = (u.d)d the inlier residual n^T u - |n|^2 has standard deviation
  // sigma |u|; the threshold is three of those at the rms flow.
  double u2 = 0.0;
  for (const auto& u : ds.full_flows) u2 += u.squaredNorm();
  const double sigma_cal = 0.1 / kCam.fx;
  RansacConfig cfg;
  cfg.seed = 7;
  cfg.threshold = 3.0 * sigma_cal * std::sqrt(u2 / static_cast<double>(ds.full_flows.size()));
  std::vector<FitReport> reports;
  for (unsigned threads : {1u, 2u, 4u}) {
    cfg.threads = threads;
    reports.push_back(ransac_estimate(ds.observations, ModelKind::AngularVelocity, {}, cfg));
  }
  bool same = true;
  for (const auto& r : reports) same = same && r.theta == reports[0].theta && r.inliers == reports[0].inliers;
  const double e = (Vec3(reports[0].theta) - w).norm();
  return {e <= 2.0 * e_inlier && same,
          fmt("%zu of 500 outliers; threshold %.2e; RANSAC err %.3e vs inlier-only %.3e (ratio %.2f); %zu inliers; "
              "threads 1/2/4 %s",
              500 - inliers.size(), cfg.threshold, e, e_inlier, e / e_inlier, reports[0].inliers.size(),
              same ? "identical" : "DIFFER")};
}

// ---------------------------------------------------------------------------
// 6. Continuous-time step response

Outcome step_criterion() {
  const double dt = 0.05;
  const double t_step = 0.25;
  auto truth = [&](double t) { return t < t_step ? 0.5 : 2.0; };
  const StepMotion motion{{Vec3::Zero(), Vec3(0, 0, 0.5)}, {Vec3::Zero(), Vec3(0, 0, 2.0)}, t_step};
  const auto ds = generate_dataset(RandomPointsScene{}, motion, kCam, 6000, TimeWindow{0.0, 0.5}, NoiseSpec{0.0, 0.0, 6});
  const auto layout = SplineTrajectory::covering(0.0, 0.5, dt, 3);
  const auto init = init_from_linear(ds.observations, ModelKind::AngularVelocity, {}, layout, RansacConfig{});
  const auto res = fit(SplineFitProblem{ds.observations, ModelKind::AngularVelocity, {}, {}}, init.trajectory);
  const auto& s = res.trajectory;

  std::vector<double> grid;
  for (int i = 0; i < 5000; ++i) grid.push_back(0.5 * (i + 0.5) / 5000.0);
  double mean = 0.0;
  for (double t : grid) mean += truth(t);
  mean /= static_cast<double>(grid.size());
  double se_spline = 0.0;
  double se_const = 0.0;
  double worst = 0.0;
  double worst_t = 0.0;
  for (double t : grid) {
    const Eigen::VectorXd th = s.evaluate(t);
    const Vec3 target(0, 0, truth(t));
    se_spline += (th - target).squaredNorm();
    se_const += Vec3(0, 0, mean - truth(t)).squaredNorm();
    if (std::abs(t - t_step) > 2.0 * dt) {
      const double e = (th - target).norm() / target.norm();
      if (e > worst) {
        worst = e;
        worst_t = t;
      }
    }
  }
  const double rmse = std::sqrt(se_spline / grid.size());
  const double rmse_const = std::sqrt(se_const / grid.size());
  const bool rmse_ok = rmse < rmse_const;
  const bool pointwise_ok = worst <= 0.05;
  return {rmse_ok && pointwise_ok,
          fmt("RMSE %.4f vs best constant %.4f (%s); worst error outside +/-2dt %.2f%% at t=%.3f (%s)", rmse,
              rmse_const, rmse_ok ? "ok" : "FAIL", 100.0 * worst, worst_t, pointwise_ok ? "ok" : "FAIL, > 5%")};
}

// ---------------------------------------------------------------------------
// 7. Extraction end to end

Outcome extraction_criterion() {
  struct Case {
    Vec2 flow_px;
    ImageEdge edge;
  };
  const std::vector<Case> cases{{{80, 30}, {Vec2(20.5, 0), Vec2(1, 0.2)}},
                                {{-50, 60}, {Vec2(200.5, 10), Vec2(-0.6, 1)}},
                                {{100, 0}, {Vec2(30.5, 0), Vec2(1, -0.5)}}};
  const double z = 3.0;
  double worst_mag = 0.0;
  double worst_par = 0.0;
  double worst_inv = 0.0;
  std::size_t count = 0;
  for (const auto& c : cases) {
    const Velocity v{Vec3(-c.flow_px.x() / kCam.fx * z, -c.flow_px.y() / kCam.fy * z, 0.0), Vec3::Zero()};
    const auto ts = synthesize_time_surface(PlaneScene{Vec3::UnitZ(), z}, v, kCam, std::vector<ImageEdge>{c.edge},
                                            TimeWindow{0.0, 0.2});
    ExtractionConfig cfg;
    cfg.temporal_window = 0.2;
    const auto r = extract_normal_flows(ts, kCam, cfg);
    const Vec2 m = c.edge.normal.normalized();
    const double mag = std::abs(c.flow_px.dot(m));
    for (const auto& f : r.flows) {
      const Vec2 n_px = flow_to_pixel(f.obs.n, kCam);
      const Vec2& g = f.gradient_px;
      worst_mag = std::max(worst_mag, std::abs(n_px.norm() - mag) / mag);
      worst_par = std::max(worst_par, std::abs(n_px.x() * g.y() - n_px.y() * g.x()) / (n_px.norm() * g.norm()));
      worst_inv = std::max(worst_inv, std::abs(n_px.norm() * g.norm() - 1.0));
      ++count;
    }
  }
  return {count > 0 && worst_mag <= 0.02 && worst_par <= 1e-9 && worst_inv <= 1e-9,
          fmt("%zu flows; magnitude err max %.3f%%; parallelism %.1e; |n||grad|-1 %.1e", count, 100.0 * worst_mag,
              worst_par, worst_inv)};
}

// ---------------------------------------------------------------------------
// 8. Runtime (soft)

Outcome runtime_criterion() {
  std::mt19937_64 rng(8);
  const Velocity v{random_dir(rng), random_dir(rng)};
  const auto ds = generate_dataset(RandomPointsScene{}, ConstantMotion{v}, kCam, 2000, TimeWindow{},
                                   NoiseSpec{0.1, 0.1, 8});
  RansacConfig cfg;
  cfg.seed = 8;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = ransac_estimate(ds.observations, ModelKind::SixDof, {ds.depths}, cfg);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {ms < 100.0, fmt("6-DoF RANSAC on 2000 observations: %.1f ms, %d iterations, %zu inliers", ms, rep.iterations,
                          rep.inliers.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "exact inversion", 10.0, true, exact_inversion},
      {2, "noise sweep", 60.0, true, noise_sweep_criterion},
      {3, "toy registration", 1.0, true, toy_registration_criterion},
      {4, "homography round trip", 5.0, true, homography_criterion},
      {5, "RANSAC robustness", 5.0, true, ransac_criterion},
      {6, "step response", 10.0, true, step_criterion},
      {7, "extraction end to end", 5.0, true, extraction_criterion},
      {8, "runtime (soft)", 0.0, false, runtime_criterion},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0.0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    std::string timing = c.budget_s > 0.0 ? fmt("%.2f s of %.0f s", secs, c.budget_s) : fmt("%.2f s", secs);
    if (!in_time) timing += ", over budget";
    std::printf("%s %d %s: %s [%s]%s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(),
                timing.c_str(), c.gating ? "" : " (soft, not gating)");
    std::fflush(stdout);
    if (!pass && c.gating) ++failed;
  }
  return failed == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
