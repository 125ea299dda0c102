#pragma once

// File formats: normal-flow CSV, intrinsics/velocity JSON, fit reports,
// spline traces and simulator ground truth.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "evnf/error.hpp"
#include "evnf/geometry.hpp"
#include "evnf/homography.hpp"
#include "evnf/linear_solvers.hpp"
#include "evnf/normal_flow.hpp"
#include "evnf/spline.hpp"
#include "evnf/synthesis.hpp"

namespace evnf {

using json = nlohmann::json;

/// Rows of a normal-flow CSV: "t,x_px,y_px,nx_cal,ny_cal,inliers,rms" with an
/// optional trailing "depth" column (metres, used by the 6-DoF model).
struct FlowTable {
  std::vector<NormalFlowObs> observations;
  std::vector<Vec2> pixels;
  std::vector<int> inliers;
  std::vector<double> rms;
  std::vector<double> depths;  // empty unless the file has a depth column

  bool has_depth() const { return !depths.empty(); }
  std::size_t size() const { return observations.size(); }
};

inline constexpr int kCsvPrecision = 9;
inline constexpr int kExactPrecision = 17;

inline std::string format_number(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

inline void write_flow_csv(std::ostream& os, const FlowTable& table, int precision = kCsvPrecision) {
  const bool depth = !table.depths.empty();
  os << "t,x_px,y_px,nx_cal,ny_cal,inliers,rms" << (depth ? ",depth" : "") << '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& o = table.observations[i];
    os << format_number(o.t, precision) << ',' << format_number(table.pixels[i].x(), precision) << ','
       << format_number(table.pixels[i].y(), precision) << ',' << format_number(o.n.x(), precision) << ','
       << format_number(o.n.y(), precision) << ',' << (i < table.inliers.size() ? table.inliers[i] : 0) << ','
       << format_number(i < table.rms.size() ? table.rms[i] : 0.0, precision);
    if (depth) os << ',' << format_number(table.depths[i], precision);
    os << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return out;
}

inline double parse_double(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

}  // namespace detail

/// Pixel columns are mapped through the intrinsics; flow columns are already
/// calibrated.
inline FlowTable read_flow_csv(std::istream& is, const Intrinsics& k) {
  FlowTable table;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) return table;
  ++line_no;
  const auto header = detail::split_csv(line);
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  const auto ct = col("t"), cx = col("x_px"), cy = col("y_px"), cnx = col("nx_cal"), cny = col("ny_cal");
  if (!ct || !cx || !cy || !cnx || !cny)
    throw Error(ErrorCode::ParseError, "line 1: header must contain t,x_px,y_px,nx_cal,ny_cal");
  const auto ci = col("inliers"), cr = col("rms"), cd = col("depth");
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size())
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected " +
                                             std::to_string(header.size()) + " fields");
    const Vec2 px(detail::parse_double(cells[*cx], line_no), detail::parse_double(cells[*cy], line_no));
    const Vec2 n(detail::parse_double(cells[*cnx], line_no), detail::parse_double(cells[*cny], line_no));
    const CalibratedPoint p{(px.x() - k.cx) / k.fx, (px.y() - k.cy) / k.fy};
    table.observations.emplace_back(p, n, detail::parse_double(cells[*ct], line_no));
    table.pixels.push_back(px);
    table.inliers.push_back(ci ? static_cast<int>(detail::parse_double(cells[*ci], line_no)) : 0);
    table.rms.push_back(cr ? detail::parse_double(cells[*cr], line_no) : 0.0);
    if (cd) table.depths.push_back(detail::parse_double(cells[*cd], line_no));
  }
  return table;
}

inline FlowTable read_flow_csv(const std::string& path, const Intrinsics& k) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  try {
    return read_flow_csv(is, k);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::IoError, "cannot write '" + tmp.string() + "'");
    os << content;
    if (!os) throw Error(ErrorCode::IoError, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot rename into '" + path.string() + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline json read_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON conversions

template <typename Derived>
json to_json_array(const Eigen::MatrixBase<Derived>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline json to_json_matrix(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r) a.push_back(to_json_array(m.row(r).transpose()));
  return a;
}

inline Vec3 vec3_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::ParseError, std::string(what) + " must be a 3-array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const json& j) {
  try {
    Intrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                 j.at("cy").get<double>(), j.at("width").get<int>(),  j.at("height").get<int>()};
    k.validate();
    return k;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("intrinsics: ") + e.what());
  }
}

inline json to_json(const Velocity& v) { return {{"nu", to_json_array(v.nu)}, {"omega", to_json_array(v.omega)}}; }

inline Velocity velocity_from_json(const json& j) {
  try {
    return {vec3_from_json(j.at("nu"), "nu"), vec3_from_json(j.at("omega"), "omega")};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("velocity: ") + e.what());
  }
}

/// {model, theta[], inliers, rms, cond}
inline json to_json(const FitReport& r) {
  return {{"model", std::string(to_string(r.kind))},
          {"theta", to_json_array(r.theta)},
          {"inliers", r.inliers.size()},
          {"rms", r.rms},
          {"cond", r.condition},
          {"iterations", r.iterations}};
}

inline json to_json(const PlanarStructure& s) {
  return {{"nu_over_d", to_json_array(s.nu_over_d)},
          {"normal", to_json_array(s.normal)},
          {"omega", to_json_array(s.omega)},
          {"skew_residual", s.skew_residual}};
}

inline std::string_view to_string(Degeneracy d) {
  switch (d) {
    case Degeneracy::None: return "none";
    case Degeneracy::PureRotation: return "pure_rotation";
    case Degeneracy::RankOne: return "rank_one";
  }
  return "unknown";
}

inline json to_json(const TrueHomography& t, const DecompositionResult& d) {
  json cands = json::array();
  for (const auto& c : d.candidates) cands.push_back(to_json(c));
  json out{{"epsilon", t.epsilon},
           {"H_d", to_json_matrix(t.h_d)},
           {"candidates", cands},
           {"degeneracy", std::string(to_string(d.degeneracy))},
           {"eigenvalues", {d.lambda_max, d.lambda_mid, d.lambda_min}}};
  if (d.degeneracy == Degeneracy::PureRotation) out["omega"] = to_json_array(d.rotation_only_omega);
  return out;
}

inline json to_json(const SplineTrajectory& s) {
  json ctrl = json::array();
  for (int i = 0; i < s.size(); ++i) ctrl.push_back(to_json_array(s.control_points().col(i)));
  json knots = json::array();
  for (int i = 0; i < s.size(); ++i) knots.push_back(s.knot_time(i));
  return {{"t0", s.t0()},
          {"dt", s.dt()},
          {"dimension", s.dimension()},
          {"knots", knots},
          {"control_points", ctrl},
          {"domain", {s.domain_begin(), s.domain_end()}}};
}

inline SplineTrajectory spline_from_json(const json& j) {
  try {
    const auto& ctrl = j.at("control_points");
    const int dim = j.at("dimension").get<int>();
    Eigen::MatrixXd m(dim, static_cast<Eigen::Index>(ctrl.size()));
    for (std::size_t i = 0; i < ctrl.size(); ++i)
      for (int d = 0; d < dim; ++d) m(d, static_cast<Eigen::Index>(i)) = ctrl[i][d].get<double>();
    return SplineTrajectory(std::move(m), j.at("t0").get<double>(), j.at("dt").get<double>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("spline: ") + e.what());
  }
}

/// Column names for a model's parameter vector.
inline std::vector<std::string> parameter_names(ModelKind kind) {
  switch (kind) {
    case ModelKind::OpticalFlow: return {"ux", "uy"};
    case ModelKind::Depth: return {"depth"};
    case ModelKind::AngularVelocity: return {"wx", "wy", "wz"};
    case ModelKind::SixDof: return {"nux", "nuy", "nuz", "wx", "wy", "wz"};
    case ModelKind::DiffHomographyLinear: return {"h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32", "h33"};
  }
  return {};
}

/// Spline plus per-knot-interval diagnostics.
inline json to_json(const SplineFitResult& r) {
  json out = to_json(r.trajectory);
  const auto& s = r.trajectory;
  json segs = json::array();
  for (int i = 1; i <= s.segments(); ++i) {
    const bool starved =
        std::find(r.report.starved_segments.begin(), r.report.starved_segments.end(), i) != r.report.starved_segments.end();
    segs.push_back({{"segment", i},
                    {"t_begin", s.knot_time(i)},
                    {"t_end", s.knot_time(i + 1)},
                    {"observations", i - 1 < static_cast<int>(r.report.segment_counts.size())
                                         ? r.report.segment_counts[i - 1]
                                         : 0},
                    {"starved", starved}});
  }
  out["segments"] = segs;
  out["rms"] = r.report.rms;
  out["huber_delta"] = r.report.huber_delta;
  out["irls_rounds"] = r.report.rounds;
  out["objective"] = r.report.objective;
  return out;
}

/// Samples theta(t) on `grid`; times outside the domain are skipped.
inline void write_trace_csv(std::ostream& os, const SplineTrajectory& s, ModelKind kind, std::span<const double> grid) {
  const auto names = parameter_names(kind);
  os << 't';
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (double t : grid) {
    if (!s.in_domain(t)) continue;
    const Eigen::VectorXd v = s.evaluate(t);
    os << format_number(t, kCsvPrecision);
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << format_number(v(i), kCsvPrecision);
    os << '\n';
  }
}

inline FlowTable to_flow_table(const ExtractionResult& r) {
  FlowTable t;
  for (const auto& f : r.flows) {
    t.observations.push_back(f.obs);
    t.pixels.push_back(f.pixel);
    t.inliers.push_back(f.inliers);
    t.rms.push_back(f.rms);
  }
  return t;
}

/// Simulator output as a flow table with a depth column.
inline FlowTable to_flow_table(const Dataset& ds) {
  FlowTable t;
  t.observations = ds.observations;
  t.pixels = ds.pixels;
  t.inliers.assign(ds.observations.size(), 0);
  t.rms.assign(ds.observations.size(), 0.0);
  t.depths = ds.depths;
  return t;
}

/// {theta: {kind: [...]}, velocity?, homography?, depths, full_flows, outlier}
inline json ground_truth_json(const Dataset& ds) {
  json theta = json::object();
  for (auto kind : {ModelKind::AngularVelocity, ModelKind::SixDof, ModelKind::DiffHomographyLinear})
    if (const auto th = ds.theta(kind)) theta[std::string(to_string(kind))] = to_json_array(*th);
  json flows = json::array();
  for (const auto& u : ds.full_flows) flows.push_back({u.x(), u.y()});
  json velocities = json::array();
  for (const auto& v : ds.velocities) velocities.push_back(to_json_array(v.stacked()));
  json out{{"theta", theta},
           {"depths", ds.depths},
           {"full_flows", flows},
           {"velocities", velocities},
           {"outlier", std::vector<bool>(ds.outlier.begin(), ds.outlier.end())}};
  if (ds.constant_velocity) out["velocity"] = to_json(*ds.constant_velocity);
  if (ds.homography) out["H_d"] = to_json_matrix(*ds.homography);
  return out;
}

}  // namespace evnf
