#pragma once

// Event streams in the plain-text "t x y p" layout and the time surface
// (latest timestamp per pixel) built from them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "evnf/error.hpp"

namespace evnf {

struct Event {
  double t = 0.0;
  int x = 0;
  int y = 0;
  int p = 1;  // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

/// Sensor bounds used to validate pixel coordinates while parsing.
struct SensorSize {
  int width = 0;
  int height = 0;

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

inline constexpr double kTimestampJitter = 1e-6;

/// Stateful line parser so that files can be streamed in chunks (and from
/// gzip) while keeping line numbers and the ordering check.
class EventParser {
 public:
  explicit EventParser(std::optional<SensorSize> bounds = std::nullopt, double jitter = kTimestampJitter)
      : bounds_(bounds), jitter_(jitter) {}

  /// Parses one line; blank lines are skipped. Returns false when nothing was
  /// appended.
  bool feed(std::string_view line, std::vector<Event>& out) {
    ++line_no_;
    const auto first = line.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return false;

    std::istringstream is{std::string(line)};
    double t = 0.0;
    long long x = 0;
    long long y = 0;
    std::string ptok;
    if (!(is >> t >> x >> y >> ptok)) fail("expected 't x y p'");
    std::string extra;
    if (is >> extra) fail("trailing token '" + extra + "'");
    if (!std::isfinite(t)) fail("non-finite timestamp");

    int p = 0;
    if (ptok == "1" || ptok == "+1") p = 1;
    else if (ptok == "0" || ptok == "-1") p = -1;
    else fail("polarity must be 0 or 1, got '" + ptok + "'");

    if (x < 0 || y < 0 || x > std::numeric_limits<int>::max() || y > std::numeric_limits<int>::max() ||
        (bounds_ && !bounds_->contains(static_cast<int>(x), static_cast<int>(y)))) {
      throw Error(ErrorCode::BoundsError, "line " + std::to_string(line_no_) + ": pixel (" + std::to_string(x) +
                                              "," + std::to_string(y) + ") outside the sensor");
    }
    if (t < latest_ - jitter_) {
      fail("timestamp " + std::to_string(t) + " precedes " + std::to_string(latest_) + " beyond the jitter budget");
    }
    latest_ = std::max(latest_, t);
    out.push_back({t, static_cast<int>(x), static_cast<int>(y), p});
    return true;
  }

  std::size_t line_number() const { return line_no_; }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no_) + ": " + why);
  }

  std::optional<SensorSize> bounds_;
  double jitter_;
  std::size_t line_no_ = 0;
  double latest_ = -std::numeric_limits<double>::infinity();
};

inline std::vector<Event> parse_event_stream(std::istream& in, std::optional<SensorSize> bounds = std::nullopt) {
  EventParser parser(bounds);
  std::vector<Event> events;
  std::string line;
  while (std::getline(in, line)) parser.feed(line, events);
  return events;
}

inline std::vector<Event> parse_event_stream(std::string_view text, std::optional<SensorSize> bounds = std::nullopt) {
  std::istringstream is{std::string(text)};
  return parse_event_stream(is, bounds);
}

/// Reads a plain or gzip-compressed event file (zlib detects which).
inline std::vector<Event> read_event_file(const std::string& path, std::optional<SensorSize> bounds = std::nullopt) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  EventParser parser(bounds);
  std::vector<Event> events;
  std::string pending;
  char buf[1 << 16];
  try {
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) {
      pending.append(buf, static_cast<std::size_t>(n));
      std::size_t start = 0;
      for (std::size_t nl = pending.find('\n'); nl != std::string::npos; nl = pending.find('\n', start)) {
        parser.feed(std::string_view(pending).substr(start, nl - start), events);
        start = nl + 1;
      }
      pending.erase(0, start);
    }
    if (n < 0) throw Error(ErrorCode::IoError, "read failure in '" + path + "'");
    if (!pending.empty()) parser.feed(pending, events);
  } catch (const Error& e) {
    gzclose(f);
    throw Error(e.code(), path + ": " + e.what());
  }
  gzclose(f);
  return events;
}

enum class PolarityFilter { Both, Positive, Negative };

/// Per-pixel latest event timestamp. Unfired pixels hold -infinity so that
/// t = 0 remains a legal timestamp.
class TimeSurface {
 public:
  static constexpr double kUnfired = -std::numeric_limits<double>::infinity();

  TimeSurface() = default;
  TimeSurface(int width, int height, double t_ref)
      : width_(width), height_(height), t_ref_(t_ref),
        stamps_(static_cast<std::size_t>(width) * height, kUnfired),
        polarity_(static_cast<std::size_t>(width) * height, 0) {
    if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "time surface needs a positive size");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  double t_ref() const { return t_ref_; }

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

  double at(int x, int y) const { return stamps_[index(x, y)]; }
  int polarity(int x, int y) const { return polarity_[index(x, y)]; }
  bool fired(int x, int y) const { return stamps_[index(x, y)] != kUnfired; }

  /// Max-wise update; events after t_ref are ignored.
  bool insert(const Event& e) {
    if (!contains(e.x, e.y) || e.t > t_ref_) return false;
    auto& s = stamps_[index(e.x, e.y)];
    if (e.t < s) return false;
    s = e.t;
    polarity_[index(e.x, e.y)] = static_cast<std::int8_t>(e.p);
    return true;
  }

  /// Direct write, used by the simulator.
  void set(int x, int y, double t, int p = 1) {
    stamps_[index(x, y)] = t;
    polarity_[index(x, y)] = static_cast<std::int8_t>(p);
  }

  std::size_t fired_count() const {
    return static_cast<std::size_t>(std::count_if(stamps_.begin(), stamps_.end(), [](double s) { return s != kUnfired; }));
  }

  const std::vector<double>& stamps() const { return stamps_; }

 private:
  int width_ = 0;
  int height_ = 0;
  double t_ref_ = 0.0;
  std::vector<double> stamps_;
  std::vector<std::int8_t> polarity_;
};

/// Keeps, per pixel, the latest event in (t_ref - window, t_ref].
inline TimeSurface build_time_surface(const std::vector<Event>& events, int width, int height, double t_ref,
                                      double temporal_window = 0.04,
                                      PolarityFilter filter = PolarityFilter::Both) {
  if (!(temporal_window > 0.0)) throw Error(ErrorCode::InvalidArgument, "temporal window must be positive");
  TimeSurface ts(width, height, t_ref);
  const double t_min = t_ref - temporal_window;
  for (const auto& e : events) {
    if (e.t <= t_min || e.t > t_ref) continue;
    if (filter == PolarityFilter::Positive && e.p < 0) continue;
    if (filter == PolarityFilter::Negative && e.p > 0) continue;
    ts.insert(e);
  }
  return ts;
}

}  // namespace evnf
