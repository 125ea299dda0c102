// evnf: normal-flow extraction, motion solvers, continuous-time fitting and
// the synthetic oracle, driven from the command line.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evnf/evnf.hpp"

namespace fs = std::filesystem;
using evnf::Error;
using evnf::ErrorCode;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDegenerate = 3;
constexpr int kExitNumerical = 4;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::OutOfBounds:
    case ErrorCode::ParseError:
    case ErrorCode::BoundsError:
    case ErrorCode::IoError:
    case ErrorCode::OutOfDomain:
      return kExitInput;
    case ErrorCode::NumericalFailure:
      return kExitNumerical;
    default:
      return kExitDegenerate;
  }
}

void report_error(std::string_view code, std::string_view message, int rc) {
  std::cerr << "error: " << message << '\n';
  std::cerr << json{{"error", code}, {"message", message}, {"exit_code", rc}}.dump() << '\n';
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(s);
  while (std::getline(is, cell, sep)) {
    const auto b = cell.find_first_not_of(" \t");
    const auto e = cell.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw Error(ErrorCode::InvalidArgument, what + ": '" + s + "' is not a number");
  return v;
}

evnf::Vec3 parse_vec3(const std::string& s, const std::string& what) {
  const auto parts = split(s, ',');
  if (parts.size() != 3) throw Error(ErrorCode::InvalidArgument, what + " needs three comma-separated values");
  return {to_double(parts[0], what), to_double(parts[1], what), to_double(parts[2], what)};
}

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  if (s.find_first_not_of(" \t") == std::string::npos) return out;
  for (const auto& p : split(s, ',')) out.push_back(to_double(p, what));
  return out;
}

evnf::ModelKind parse_kind(const std::string& s) {
  const auto k = evnf::parse_model_kind(s);
  if (!k) throw Error(ErrorCode::InvalidArgument, "unknown model kind '" + s + "'");
  return *k;
}

evnf::Intrinsics load_intrinsics(const std::string& path) {
  if (path.empty()) return {};
  return evnf::intrinsics_from_json(evnf::read_json_file(path));
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  auto out = p;
  out.replace_extension(suffix);
  return out;
}

/// Options of one subcommand as they were resolved (flag, config file,
/// environment or default).
json resolved_options(const CLI::App& sub) {
  json j = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (o->count() > 0) {
      const auto r = o->reduced_results();
      j[name] = r.size() == 1 ? json(r.front()) : json(r);
    } else {
      j[name] = o->get_default_str();
    }
  }
  return j;
}

/// Seed, versions, resolved configuration and content hashes of the inputs.
class Manifest {
 public:
  Manifest(const CLI::App& sub, std::uint64_t seed) : sub_(sub), seed_(seed) {}

  void input(const std::string& path) {
    if (!path.empty()) inputs_[path] = hex64(fnv1a(evnf::read_file(path)));
  }
  void output(const fs::path& path) { outputs_.push_back(path.string()); }

  void write(const fs::path& path) const {
    const json config = resolved_options(sub_);
    json m{{"tool", "evnf"},
           {"version", evnf::kVersion},
           {"subcommand", sub_.get_name()},
           {"seed", seed_},
           {"config", config},
           {"config_hash", hex64(fnv1a(config.dump()))},
           {"inputs", inputs_},
           {"outputs", outputs_},
           {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
           {"compiler", __VERSION__}};
    evnf::write_file_atomic(path, m.dump(2) + "\n");
  }

 private:
  const CLI::App& sub_;
  std::uint64_t seed_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

std::string flows_csv(const evnf::FlowTable& t, int precision) {
  std::ostringstream os;
  evnf::write_flow_csv(os, t, precision);
  return os.str();
}

void add_seed(CLI::App* sub, std::uint64_t& seed) {
  sub->add_option("--seed", seed, "random seed (falls back to EVNF_SEED)")->envname("EVNF_SEED");
}

/// Flat `key = value` files apply to the subcommand being run. Values with
/// commas stay single strings; list-valued options parse them.
class FlatConfig : public CLI::ConfigBase {
 public:
  explicit FlatConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigBase::from_config(input);
    const auto subs = app_.get_subcommands();
    for (auto& item : items) {
      if (item.parents.empty() && !subs.empty()) item.parents = {subs.front()->get_name()};
      if (item.inputs.size() > 1) {
        std::string joined;
        for (const auto& v : item.inputs) joined += (joined.empty() ? "" : ",") + v;
        item.inputs = {joined};
      }
    }
    return items;
  }

 private:
  const CLI::App& app_;
};

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
  std::string events;
  std::string intrinsics;
  std::string output;
  std::string stats;
  double t_ref = std::numeric_limits<double>::quiet_NaN();
  int slices = 1;
  double slice_step = std::numeric_limits<double>::quiet_NaN();
  std::string polarity = "both";
  std::uint64_t seed = 0;
  evnf::ExtractionConfig cfg;
};

void setup_extract(CLI::App& app, ExtractArgs& a) {
  auto* s = app.add_subcommand("extract", "normal flow from an event stream");
  s->add_option("--events", a.events, "event file: t x y p per line")->required();
  s->add_option("--intrinsics", a.intrinsics, "intrinsics JSON (fx, fy, cx, cy, width, height)");
  s->add_option("-o,--output", a.output, "flows CSV")->required();
  s->add_option("--stats", a.stats, "stats JSON (default: next to the output)");
  s->add_option("--t-ref", a.t_ref, "time-surface reference time (default: last event)");
  s->add_option("--slices", a.slices, "number of time surfaces ending at t-ref")->check(CLI::PositiveNumber);
  s->add_option("--slice-step", a.slice_step, "spacing of the slices (default: temporal window)");
  s->add_option("--polarity", a.polarity, "both, positive or negative")
      ->check(CLI::IsMember({"both", "positive", "negative"}));
  s->add_option("--spatial-window", a.cfg.spatial_window, "plane-fit patch size, odd px");
  s->add_option("--temporal-window", a.cfg.temporal_window, "time-surface window, s");
  s->add_option("--plane-threshold", a.cfg.plane_ransac_thresh, "plane RANSAC inlier threshold, s");
  s->add_option("--max-flow", a.cfg.max_flow, "flow magnitude cap, px/s");
  s->add_option("--min-gradient", a.cfg.min_gradient, "gradient floor, s/px");
  s->add_option("--min-support", a.cfg.min_support, "minimum fired pixels in a patch");
  s->add_option("--plane-iterations", a.cfg.ransac_iterations, "plane RANSAC iterations");
  s->add_option("--threads", a.cfg.threads, "worker threads");
  add_seed(s, a.seed);
}

int run_extract(const CLI::App& sub, ExtractArgs& a) {
  const auto started = std::chrono::steady_clock::now();
  const auto k = load_intrinsics(a.intrinsics);
  a.cfg.seed = a.seed;
  a.cfg.validate();
  const auto events = evnf::read_event_file(a.events, evnf::SensorSize{k.width, k.height});
  const auto filter = a.polarity == "positive"   ? evnf::PolarityFilter::Positive
                      : a.polarity == "negative" ? evnf::PolarityFilter::Negative
                                                 : evnf::PolarityFilter::Both;
  const double step = std::isnan(a.slice_step) ? a.cfg.temporal_window : a.slice_step;
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "slice step must be positive");

  evnf::FlowTable table;
  json slices = json::array();
  std::map<std::string, std::size_t> rejected;
  std::size_t attempted = 0;
  if (!events.empty()) {
    double t_ref = a.t_ref;
    if (std::isnan(t_ref)) {
      t_ref = events.front().t;
      for (const auto& e : events) t_ref = std::max(t_ref, e.t);
    }
    for (int i = 0; i < a.slices; ++i) {
      const double tr = t_ref - (a.slices - 1 - i) * step;
      const auto ts = evnf::build_time_surface(events, k.width, k.height, tr, a.cfg.temporal_window, filter);
      const auto r = evnf::extract_normal_flows(ts, k, a.cfg);
      const auto part = evnf::to_flow_table(r);
      table.observations.insert(table.observations.end(), part.observations.begin(), part.observations.end());
      table.pixels.insert(table.pixels.end(), part.pixels.begin(), part.pixels.end());
      table.inliers.insert(table.inliers.end(), part.inliers.begin(), part.inliers.end());
      table.rms.insert(table.rms.end(), part.rms.begin(), part.rms.end());
      attempted += r.attempted;
      for (const auto& [reason, n] : r.rejected) rejected[reason] += n;
      slices.push_back({{"t_ref", tr},
                        {"fired", ts.fired_count()},
                        {"attempted", r.attempted},
                        {"extracted", r.flows.size()}});
    }
  }

  const fs::path out(a.output);
  const fs::path stats_path = a.stats.empty() ? sibling(out, ".stats.json") : fs::path(a.stats);
  evnf::write_file_atomic(out, flows_csv(table, evnf::kCsvPrecision));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  const json stats{{"events", events.size()},
                   {"attempted", attempted},
                   {"extracted", table.size()},
                   {"rejected", rejected},
                   {"slices", slices},
                   {"wall_time_s", wall}};
  evnf::write_file_atomic(stats_path, stats.dump(2) + "\n");

  Manifest m(sub, a.seed);
  m.input(a.events);
  m.input(a.intrinsics);
  m.output(out);
  m.output(stats_path);
  m.write(sibling(out, ".manifest.json"));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// solve

struct RansacArgs {
  double threshold = 1e-4;
  double threshold_px = std::numeric_limits<double>::quiet_NaN();
  int max_iterations = 1000;
  double confidence = 0.99;
  int refit_rounds = 3;
  unsigned threads = 1;
};

void add_ransac(CLI::App* s, RansacArgs& r) {
  auto* cal = s->add_option("--threshold", r.threshold, "inlier threshold on the constraint residual, calibrated units");
  auto* px = s->add_option("--threshold-px", r.threshold_px, "inlier threshold stated for pixel-unit normal flow");
  cal->excludes(px);
  s->add_option("--max-iterations", r.max_iterations, "RANSAC iteration cap");
  s->add_option("--confidence", r.confidence, "RANSAC early-exit confidence");
  s->add_option("--refit-rounds", r.refit_rounds, "least-squares refits on the consensus set");
  s->add_option("--threads", r.threads, "worker threads");
}

evnf::RansacConfig ransac_config(const RansacArgs& r, const evnf::Intrinsics& k, std::uint64_t seed) {
  evnf::RansacConfig c;
  c.threshold = std::isnan(r.threshold_px) ? r.threshold : evnf::calibrated_threshold(r.threshold_px, k);
  c.max_iterations = r.max_iterations;
  c.confidence = r.confidence;
  c.refit_rounds = r.refit_rounds;
  c.threads = r.threads;
  c.seed = seed;
  c.validate();
  return c;
}

struct SolveArgs {
  std::string flows;
  std::string intrinsics;
  std::string kind;
  std::string velocity;
  std::string output;
  std::uint64_t seed = 0;
  RansacArgs ransac;
};

void setup_solve(CLI::App& app, SolveArgs& a) {
  auto* s = app.add_subcommand("solve", "fit one model to a flows CSV");
  s->add_option("--flows", a.flows, "flows CSV")->required();
  s->add_option("--intrinsics", a.intrinsics, "intrinsics JSON");
  s->add_option("--kind", a.kind, "optical_flow, depth, angular_velocity, six_dof or diff_homography")->required();
  s->add_option("--velocity", a.velocity, "camera velocity JSON (nu, omega) or spline JSON, for optical_flow and depth");
  s->add_option("-o,--output", a.output, "fit JSON")->required();
  add_ransac(s, a.ransac);
  add_seed(s, a.seed);
}

/// Constant velocity or a 3-/6-dimensional velocity spline.
class VelocitySource {
 public:
  explicit VelocitySource(const json& j) {
    if (j.contains("control_points")) spline_ = evnf::spline_from_json(j);
    else constant_ = evnf::velocity_from_json(j);
  }
  evnf::Velocity at(double t) const {
    if (constant_) return *constant_;
    const Eigen::VectorXd th = spline_->evaluate(t);
    if (th.size() == 6) return evnf::Velocity::from_stacked(th);
    if (th.size() == 3) return {evnf::Vec3::Zero(), th};
    throw Error(ErrorCode::InvalidArgument, "velocity spline must be 3- or 6-dimensional");
  }

 private:
  std::optional<evnf::Velocity> constant_;
  std::optional<evnf::SplineTrajectory> spline_;
};

json solve_batch_kind(evnf::ModelKind kind, const evnf::FlowTable& table, const evnf::RansacConfig& rc) {
  if (kind == evnf::ModelKind::SixDof && !table.has_depth())
    throw Error(ErrorCode::InvalidArgument, "missing depth: six_dof needs a depth column in the flows CSV");
  const evnf::ModelContext ctx{table.depths};
  const auto rep = evnf::ransac_estimate(table.observations, kind, ctx, rc);
  json out{{"kind", evnf::to_string(kind)}, {"observations", table.size()}, {"fit", evnf::to_json(rep)}};
  json params = json::object();
  const auto names = evnf::parameter_names(kind);
  for (std::size_t i = 0; i < names.size(); ++i) params[names[i]] = rep.theta(static_cast<Eigen::Index>(i));
  out["parameters"] = params;
  if (kind == evnf::ModelKind::SixDof) out["velocity"] = evnf::to_json(evnf::Velocity::from_stacked(rep.theta));
  if (kind == evnf::ModelKind::DiffHomographyLinear) {
    const auto th = evnf::recover_true_Hd(evnf::unvectorize(rep.theta));
    out["homography"] = evnf::to_json(th, evnf::decompose_Hd(th.h_d));
  }
  return out;
}

json solve_per_observation(evnf::ModelKind kind, const evnf::FlowTable& table, const VelocitySource& vel,
                           const evnf::Intrinsics& k) {
  json results = json::array();
  std::size_t solved = 0;
  std::optional<Error> first_error;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& o = table.observations[i];
    json r{{"index", i}, {"t", o.t}, {"x_px", table.pixels[i].x()}, {"y_px", table.pixels[i].y()}};
    try {
      const auto v = vel.at(o.t);
      if (kind == evnf::ModelKind::OpticalFlow) {
        const evnf::Vec2 u = evnf::solve_optical_flow(o, v);
        r["flow_cal"] = evnf::to_json_array(u);
        r["flow_px"] = evnf::to_json_array(evnf::flow_to_pixel(u, k));
      } else {
        const auto d = evnf::solve_depth(o, v);
        r["depth"] = d.depth;
        r["cheirality_ok"] = d.cheirality_ok;
      }
      ++solved;
    } catch (const Error& e) {
      if (exit_code(e.code()) != kExitDegenerate) throw;
      if (!first_error) first_error = e;
      r["error"] = evnf::to_string(e.code());
    }
    results.push_back(std::move(r));
  }
  if (solved == 0 && first_error) throw *first_error;
  return {{"kind", evnf::to_string(kind)},
          {"observations", table.size()},
          {"solved", solved},
          {"failed", table.size() - solved},
          {"results", results}};
}

int run_solve(const CLI::App& sub, const SolveArgs& a) {
  const auto kind = parse_kind(a.kind);
  const auto k = load_intrinsics(a.intrinsics);
  const auto table = evnf::read_flow_csv(a.flows, k);
  json out;
  if (evnf::is_batch_model(kind)) {
    out = solve_batch_kind(kind, table, ransac_config(a.ransac, k, a.seed));
  } else {
    if (a.velocity.empty())
      throw Error(ErrorCode::InvalidArgument, "missing velocity: " + std::string(evnf::to_string(kind)) +
                                                  " needs --velocity");
    out = solve_per_observation(kind, table, VelocitySource(evnf::read_json_file(a.velocity)), k);
  }
  const fs::path path(a.output);
  evnf::write_file_atomic(path, out.dump(2) + "\n");
  Manifest m(sub, a.seed);
  m.input(a.flows);
  m.input(a.intrinsics);
  m.input(a.velocity);
  m.output(path);
  m.write(sibling(path, ".manifest.json"));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit-spline

struct SplineArgs {
  std::string flows;
  std::string intrinsics;
  std::string kind = "angular_velocity";
  std::string output;
  std::string trace;
  double dt = 0.05;
  double t_begin = std::numeric_limits<double>::quiet_NaN();
  double t_end = std::numeric_limits<double>::quiet_NaN();
  double trace_step = std::numeric_limits<double>::quiet_NaN();
  bool no_robust = false;
  double huber_factor = 3.0;
  int irls_rounds = 20;
  double starved_regularization = 1e-3;
  std::uint64_t seed = 0;
  RansacArgs ransac;
};

void setup_fit_spline(CLI::App& app, SplineArgs& a) {
  auto* s = app.add_subcommand("fit-spline", "continuous-time cubic B-spline fit");
  s->add_option("--flows", a.flows, "flows CSV")->required();
  s->add_option("--intrinsics", a.intrinsics, "intrinsics JSON");
  s->add_option("--kind", a.kind, "angular_velocity or six_dof");
  s->add_option("-o,--output", a.output, "spline JSON")->required();
  s->add_option("--trace", a.trace, "sampled trace CSV (default: next to the output)");
  s->add_option("--dt", a.dt, "knot spacing, s");
  s->add_option("--t-begin", a.t_begin, "start of the fitted window (default: first timestamp)");
  s->add_option("--t-end", a.t_end, "end of the fitted window (default: just past the last timestamp)");
  s->add_option("--trace-step", a.trace_step, "trace sampling step (default: dt / 10)");
  s->add_flag("--no-robust", a.no_robust, "plain least squares instead of Huber IRLS");
  s->add_option("--huber-factor", a.huber_factor, "Huber delta as a multiple of the median |residual|");
  s->add_option("--irls-rounds", a.irls_rounds, "IRLS round cap");
  s->add_option("--starved-regularization", a.starved_regularization, "smoothness weight on empty knot intervals");
  add_ransac(s, a.ransac);
  add_seed(s, a.seed);
}

int run_fit_spline(const CLI::App& sub, const SplineArgs& a) {
  const auto kind = parse_kind(a.kind);
  const int dim = evnf::detail::spline_dimension(kind);
  if (!(a.dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "dt must be positive");
  const auto k = load_intrinsics(a.intrinsics);
  const auto table = evnf::read_flow_csv(a.flows, k);
  if (kind == evnf::ModelKind::SixDof && !table.has_depth())
    throw Error(ErrorCode::InvalidArgument, "missing depth: six_dof needs a depth column in the flows CSV");
  if (table.size() == 0) throw Error(ErrorCode::UnderDetermined, "no observations to fit");

  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& o : table.observations) {
    lo = std::min(lo, o.t);
    hi = std::max(hi, o.t);
  }
  const double tb = std::isnan(a.t_begin) ? lo : a.t_begin;
  const double te = std::isnan(a.t_end) ? std::nextafter(hi, std::numeric_limits<double>::infinity()) : a.t_end;
  if (!(te > tb)) throw Error(ErrorCode::InvalidArgument, "empty fitting window");
  if (te - tb < 4.0 * a.dt) {
    std::ostringstream msg;
    msg << "timestamps span " << te - tb << " s, fewer than 4 knot intervals of " << a.dt << " s";
    throw Error(ErrorCode::UnderDetermined, msg.str());
  }

  std::vector<evnf::NormalFlowObs> obs;
  std::vector<double> depths;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const double t = table.observations[i].t;
    if (t < tb || t >= te) continue;
    obs.push_back(table.observations[i]);
    if (table.has_depth()) depths.push_back(table.depths[i]);
  }
  const evnf::ModelContext ctx{depths};
  const auto layout = evnf::SplineTrajectory::covering(tb, te, a.dt, dim);
  const auto init = evnf::init_from_linear(obs, kind, ctx, layout, ransac_config(a.ransac, k, a.seed));
  evnf::SplineFitConfig fc;
  fc.robust = !a.no_robust;
  fc.huber_scale_factor = a.huber_factor;
  fc.max_irls_rounds = a.irls_rounds;
  fc.starved_regularization = a.starved_regularization;
  const auto res = evnf::fit(evnf::SplineFitProblem{obs, kind, ctx, fc}, init.trajectory);

  const auto& s = res.trajectory;
  const double step = std::isnan(a.trace_step) ? a.dt / 10.0 : a.trace_step;
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "trace step must be positive");
  std::vector<double> grid;
  for (long i = 0;; ++i) {
    const double t = s.domain_begin() + static_cast<double>(i) * step;
    if (t >= s.domain_end()) break;
    grid.push_back(t);
  }
  std::ostringstream trace;
  evnf::write_trace_csv(trace, s, kind, grid);

  json out = evnf::to_json(res);
  out["kind"] = evnf::to_string(kind);
  out["observations"] = obs.size();
  const fs::path path(a.output);
  const fs::path trace_path = a.trace.empty() ? sibling(path, ".trace.csv") : fs::path(a.trace);
  evnf::write_file_atomic(path, out.dump(2) + "\n");
  evnf::write_file_atomic(trace_path, trace.str());
  Manifest m(sub, a.seed);
  m.input(a.flows);
  m.input(a.intrinsics);
  m.output(path);
  m.output(trace_path);
  m.write(sibling(path, ".manifest.json"));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string output;
  std::string intrinsics;
  std::string scene = "random";
  double depth_min = 2.0;
  double depth_max = 6.0;
  std::string plane_normal = "0,0,1";
  double plane_distance = 3.0;
  double walls_angle = 0.75 * std::numbers::pi;
  double walls_distance = 3.0;
  std::string motion = "constant";
  std::string nu = "0,0,0";
  std::string omega = "0,0,0";
  std::string nu_after = "0,0,0";
  std::string omega_after = "0,0,0";
  double t_switch = 0.0;
  std::size_t count = 1000;
  double t_begin = 0.0;
  double t_end = 0.04;
  double noise_px = 0.0;
  double outlier_fraction = 0.0;
  unsigned threads = 1;
  std::uint64_t seed = 0;
};

void setup_simulate(CLI::App& app, SimulateArgs& a) {
  auto* s = app.add_subcommand("simulate", "write a synthetic normal-flow dataset");
  s->add_option("-o,--output", a.output, "dataset directory")->required();
  s->add_option("--intrinsics", a.intrinsics, "intrinsics JSON");
  s->add_option("--scene", a.scene, "random, plane or walls")->check(CLI::IsMember({"random", "plane", "walls"}));
  s->add_option("--depth-min", a.depth_min, "random scene: nearest depth");
  s->add_option("--depth-max", a.depth_max, "random scene: farthest depth");
  s->add_option("--plane-normal", a.plane_normal, "plane scene: unit normal x,y,z");
  s->add_option("--plane-distance", a.plane_distance, "plane scene: distance");
  s->add_option("--walls-angle", a.walls_angle, "walls scene: opening angle, rad")
      ->default_str(evnf::format_number(a.walls_angle, evnf::kExactPrecision));
  s->add_option("--walls-distance", a.walls_distance, "walls scene: distance to the corner");
  s->add_option("--motion", a.motion, "constant or step")->check(CLI::IsMember({"constant", "step"}));
  s->add_option("--nu", a.nu, "linear velocity x,y,z");
  s->add_option("--omega", a.omega, "angular velocity x,y,z, rad/s");
  s->add_option("--nu-after", a.nu_after, "step motion: linear velocity after the switch");
  s->add_option("--omega-after", a.omega_after, "step motion: angular velocity after the switch");
  s->add_option("--t-switch", a.t_switch, "step motion: switch time");
  s->add_option("--count", a.count, "number of observations");
  s->add_option("--t-begin", a.t_begin, "start of the sampled window");
  s->add_option("--t-end", a.t_end, "end of the sampled window");
  s->add_option("--noise-px", a.noise_px, "Gaussian noise per normal-flow component, px/s");
  s->add_option("--outlier-fraction", a.outlier_fraction, "fraction replaced by random flows");
  s->add_option("--threads", a.threads, "worker threads");
  add_seed(s, a.seed);
}

int run_simulate(const CLI::App& sub, const SimulateArgs& a) {
  const auto k = load_intrinsics(a.intrinsics);
  evnf::SceneSpec scene;
  if (a.scene == "plane") scene = evnf::PlaneScene{parse_vec3(a.plane_normal, "plane-normal"), a.plane_distance};
  else if (a.scene == "walls") scene = evnf::TwoWallsScene{a.walls_angle, a.walls_distance};
  else scene = evnf::RandomPointsScene{a.depth_min, a.depth_max};
  const evnf::Velocity v{parse_vec3(a.nu, "nu"), parse_vec3(a.omega, "omega")};
  evnf::MotionProfile motion = evnf::ConstantMotion{v};
  if (a.motion == "step")
    motion = evnf::StepMotion{v, {parse_vec3(a.nu_after, "nu-after"), parse_vec3(a.omega_after, "omega-after")},
                              a.t_switch};
  const auto ds = evnf::generate_dataset(scene, motion, k, a.count, evnf::TimeWindow{a.t_begin, a.t_end},
                                         evnf::NoiseSpec{a.noise_px, a.outlier_fraction, a.seed},
                                         evnf::GenerationOptions{a.threads, 1000});
  const fs::path dir(a.output);
  const fs::path obs = dir / "observations.csv";
  const fs::path truth = dir / "ground_truth.json";
  const fs::path intr = dir / "intrinsics.json";
  evnf::write_file_atomic(obs, flows_csv(evnf::to_flow_table(ds), evnf::kExactPrecision));
  evnf::write_file_atomic(truth, evnf::ground_truth_json(ds).dump() + "\n");
  evnf::write_file_atomic(intr, evnf::to_json(k).dump(2) + "\n");
  Manifest m(sub, a.seed);
  m.input(a.intrinsics);
  m.output(obs);
  m.output(truth);
  m.output(intr);
  m.write(dir / "manifest.json");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench-noise

struct BenchArgs {
  std::string kind = "angular_velocity";
  std::string grid = "0.01,0.1,1,10,100";
  int trials = 20;
  std::size_t count = 500;
  std::string intrinsics;
  std::string output;
  std::uint64_t seed = 0;
};

void setup_bench(CLI::App& app, BenchArgs& a) {
  auto* s = app.add_subcommand("bench-noise", "parameter error against normal-flow noise");
  s->add_option("--kind", a.kind, "model kind");
  s->add_option("--grid", a.grid, "comma-separated noise levels, px/s, strictly increasing");
  s->add_option("--trials", a.trials, "trials per noise level");
  s->add_option("--count", a.count, "observations per trial");
  s->add_option("--intrinsics", a.intrinsics, "intrinsics JSON");
  s->add_option("-o,--output", a.output, "results CSV")->required();
  add_seed(s, a.seed);
}

int run_bench(const CLI::App& sub, const BenchArgs& a) {
  evnf::NoiseSweepConfig cfg;
  cfg.kind = parse_kind(a.kind);
  cfg.grid = parse_list(a.grid, "grid");
  cfg.trials = a.trials;
  cfg.observations = a.count;
  cfg.seed = a.seed;
  cfg.intrinsics = load_intrinsics(a.intrinsics);
  const auto rows = evnf::noise_sweep(cfg);
  std::ostringstream os;
  os << "noise_px,median,q25,q75,failures\n";
  for (const auto& r : rows)
    os << evnf::format_number(r.noise_px, evnf::kCsvPrecision) << ',' << evnf::format_number(r.median, evnf::kCsvPrecision)
       << ',' << evnf::format_number(r.q25, evnf::kCsvPrecision) << ','
       << evnf::format_number(r.q75, evnf::kCsvPrecision) << ',' << r.failures << '\n';
  const fs::path path(a.output);
  evnf::write_file_atomic(path, os.str());
  Manifest m(sub, a.seed);
  m.input(a.intrinsics);
  m.output(path);
  m.write(sibling(path, ".manifest.json"));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Egomotion and structure from event-camera normal flow"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(evnf::kVersion));
  app.option_defaults()->always_capture_default();
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "key = value file for the subcommand; flags override it");
  app.config_formatter(std::make_shared<FlatConfig>(app));

  ExtractArgs extract;
  SolveArgs solve;
  SplineArgs spline;
  SimulateArgs simulate;
  BenchArgs bench;
  setup_extract(app, extract);
  setup_solve(app, solve);
  setup_fit_spline(app, spline);
  setup_simulate(app, simulate);
  setup_bench(app, bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInput;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "extract") return run_extract(*sub, extract);
    if (name == "solve") return run_solve(*sub, solve);
    if (name == "fit-spline") return run_fit_spline(*sub, spline);
    if (name == "simulate") return run_simulate(*sub, simulate);
    return run_bench(*sub, bench);
  } catch (const Error& e) {
    const int rc = exit_code(e.code());
    report_error(evnf::to_string(e.code()), e.what(), rc);
    return rc;
  } catch (const json::exception& e) {
    report_error(evnf::to_string(ErrorCode::ParseError), e.what(), kExitInput);
    return kExitInput;
  } catch (const std::exception& e) {
    report_error(evnf::to_string(ErrorCode::NumericalFailure), e.what(), kExitNumerical);
    return kExitNumerical;
  }
}
