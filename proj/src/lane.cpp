#include "laneformer/lane.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace laneformer {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Shortest decimal that keeps coordinates well under the 0.5 px round-trip
// budget; integral values print bare ("50", not "50.0000").
std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

}  // namespace

Index Lane::first_valid_row() const {
  for (Index i = 0; i < kGridRows; ++i) {
    if (row_valid(i)) return i;
  }
  return -1;
}

Index Lane::last_valid_row() const {
  for (Index i = kGridRows - 1; i >= 0; --i) {
    if (row_valid(i)) return i;
  }
  return -1;
}

Index Lane::valid_rows() const {
  Index n = 0;
  for (Index i = 0; i < kGridRows; ++i) n += row_valid(i) ? 1 : 0;
  return n;
}

double Lane::x_at(double y) const {
  if (y < s - 1e-6 || y > e + 1e-6) {
    throw Error("x_at: y outside the lane's [s, e] span");
  }
  Index lo = first_valid_row();
  Index hi = last_valid_row();
  if (lo < 0) {
    throw Error("x_at: lane covers no grid row");
  }
  double pos = y * static_cast<double>(kGridRows - 1);
  Index r0 = static_cast<Index>(std::floor(pos));
  Index r1 = r0 + 1;
  // Clamp into the valid range so placeholders are never read; the sliver
  // between s and the first grid row extends the end value.
  r0 = std::clamp(r0, lo, hi);
  r1 = std::clamp(r1, lo, hi);
  if (r0 == r1) return xs[static_cast<std::size_t>(r0)];
  double t = pos - std::floor(pos);
  return (1.0 - t) * xs[static_cast<std::size_t>(r0)] +
         t * xs[static_cast<std::size_t>(r1)];
}

Lane resample_to_grid(std::vector<PointPx> points, double width, double height) {
  if (points.size() < 2) {
    throw Error("resample_to_grid: need at least 2 points, got " +
                std::to_string(points.size()));
  }
  if (width <= 0.0 || height <= 0.0) {
    throw Error("resample_to_grid: image size must be positive");
  }
  std::sort(points.begin(), points.end(),
            [](const PointPx& a, const PointPx& b) { return a.y < b.y; });
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (!(points[i].y > points[i - 1].y)) {
      throw Error("resample_to_grid: y values must be strictly monotonic");
    }
  }
  double y_min = points.front().y;
  double y_max = points.back().y;
  double tol = 1e-6 * height;  // absorbs text-format rounding on round-trips

  Lane lane;
  lane.s = clamp01(y_min / height);
  lane.e = clamp01(y_max / height);

  std::size_t seg = 0;
  for (Index i = 0; i < kGridRows; ++i) {
    double py = grid_y(i) * height;
    if (py < y_min - tol || py > y_max + tol) continue;
    while (seg + 2 < points.size() && points[seg + 1].y < py) ++seg;
    const PointPx& a = points[seg];
    const PointPx& b = points[seg + 1];
    double t = (py - a.y) / (b.y - a.y);
    t = std::clamp(t, 0.0, 1.0);
    double x = a.x + t * (b.x - a.x);
    lane.xs[static_cast<std::size_t>(i)] = clamp01(x / width);
  }
  return lane;
}

std::vector<Lane> parse_culane_lines(const std::string& text, double width,
                                     double height) {
  std::vector<Lane> lanes;
  std::istringstream stream(text);
  std::string line;
  long line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<double> tokens;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        tokens.push_back(v);
      } catch (const std::exception&) {
        throw ParseError("non-numeric token '" + tok + "'", line_no);
      }
    }
    if (tokens.size() % 2 != 0) {
      throw ParseError("odd token count " + std::to_string(tokens.size()), line_no);
    }
    if (tokens.size() < 4) {
      throw ParseError("lane needs at least 2 points, got " +
                       std::to_string(tokens.size() / 2), line_no);
    }
    std::vector<PointPx> pts;
    pts.reserve(tokens.size() / 2);
    for (std::size_t i = 0; i < tokens.size(); i += 2) {
      pts.push_back({tokens[i], tokens[i + 1]});
    }
    try {
      lanes.push_back(resample_to_grid(std::move(pts), width, height));
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return lanes;
}

std::string emit_culane_lines(const std::vector<Lane>& lanes, double width,
                              double height) {
  std::string out;
  for (const Lane& lane : lanes) {
    if (lane.valid_rows() < 2) continue;
    std::string line;
    for (Index i = kGridRows - 1; i >= 0; --i) {  // bottom-to-top
      if (!lane.row_valid(i)) continue;
      if (!line.empty()) line += ' ';
      line += format_coord(lane.xs[static_cast<std::size_t>(i)] * width);
      line += ' ';
      line += format_coord(grid_y(i) * height);
    }
    out += line;
    out += '\n';
  }
  return out;
}

std::vector<TuSimpleFrame> parse_tusimple_json(const std::string& text,
                                               double width, double height) {
  std::vector<TuSimpleFrame> frames;
  std::istringstream stream(text);
  std::string line;
  long line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!j.contains("lanes") || !j.contains("h_samples")) {
      throw ParseError("frame object needs 'lanes' and 'h_samples'", line_no);
    }
    TuSimpleFrame frame;
    frame.raw_file = j.value("raw_file", std::string());
    frame.h_samples = j["h_samples"].get<std::vector<double>>();
    for (const auto& lane_xs : j["lanes"]) {
      std::vector<double> xs = lane_xs.get<std::vector<double>>();
      if (xs.size() != frame.h_samples.size()) {
        throw ParseError("lane has " + std::to_string(xs.size()) +
                         " points but h_samples has " +
                         std::to_string(frame.h_samples.size()), line_no);
      }
      std::vector<PointPx> pts;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] == -2.0) continue;  // absent point marker
        pts.push_back({xs[i], frame.h_samples[i]});
      }
      if (pts.size() < 2) continue;  // all -2 (or a single point): no lane
      frame.lanes.push_back(resample_to_grid(std::move(pts), width, height));
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

std::string emit_tusimple_json(const std::vector<TuSimpleFrame>& frames,
                               double width, double height) {
  std::string out;
  for (const TuSimpleFrame& frame : frames) {
    nlohmann::json j;
    nlohmann::json lanes = nlohmann::json::array();
    for (const Lane& lane : frame.lanes) {
      nlohmann::json xs = nlohmann::json::array();
      for (double py : frame.h_samples) {
        double y = py / height;
        if (y < lane.s - 1e-6 || y > lane.e + 1e-6) {
          xs.push_back(-2);
        } else {
          xs.push_back(static_cast<long>(std::llround(lane.x_at(y) * width)));
        }
      }
      lanes.push_back(std::move(xs));
    }
    j["lanes"] = std::move(lanes);
    nlohmann::json hs = nlohmann::json::array();
    for (double py : frame.h_samples) {
      double r = std::round(py);
      if (r == py) {
        hs.push_back(static_cast<long>(r));
      } else {
        hs.push_back(py);
      }
    }
    j["h_samples"] = std::move(hs);
    j["raw_file"] = frame.raw_file;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace laneformer
