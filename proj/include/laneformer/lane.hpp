// Lane representation l = (X, s, e) on the fixed 72-row grid, plus the
// CULane and TuSimple interchange formats.
#pragma once

#include "laneformer/error.hpp"
#include "laneformer/tensor.hpp"

#include <array>
#include <string>
#include <vector>

namespace laneformer {

inline constexpr Index kGridRows = 72;

/// Normalized y of grid row i: rows span the full image height uniformly,
/// row 0 at the top, row 71 at the bottom.
inline double grid_y(Index row) {
  return static_cast<double>(row) / static_cast<double>(kGridRows - 1);
}

/// A lane as 72 x-coordinates (one per grid row) with a vertical extent.
/// All coordinates are normalized to [0,1]; pixel conversion happens only at
/// I/O boundaries. Rows outside [s, e] hold a placeholder x of 0 that loss
/// and metrics must never read; consult row_valid() instead.
struct Lane {
  std::array<double, kGridRows> xs{};
  double s = 0.0;
  double e = 0.0;

  bool row_valid(Index row) const {
    // Tolerance well under the 1/71 grid spacing but above text-format noise.
    double y = grid_y(row);
    return y >= s - 1e-6 && y <= e + 1e-6;
  }
  /// First/last valid grid row, or -1 if the span covers no row.
  Index first_valid_row() const;
  Index last_valid_row() const;
  Index valid_rows() const;

  /// Interpolated x at normalized y inside [s, e]; throws Error outside.
  double x_at(double y) const;
};

/// One of the N ground-truth slots a frame is padded to: class 0 = non-lane
/// (padding), class 1 = a real lane.
struct GroundTruthSlot {
  int c = 0;
  Lane lane;  // meaningful iff c == 1
};

struct PointPx {
  double x = 0.0;
  double y = 0.0;
};

/// Resamples a pixel-space polyline onto the 72-row grid of a width x height
/// image. x is linearly interpolated at every grid row inside the polyline's
/// y-span; s and e are the normalized span endpoints. Throws Error on fewer
/// than 2 points or duplicate y values (zero-span segments included).
Lane resample_to_grid(std::vector<PointPx> points, double width, double height);

/// CULane text format: one lane per line, space-separated "x y" pixel pairs.
std::vector<Lane> parse_culane_lines(const std::string& text, double width,
                                     double height);
/// Writes one line per lane, points ordered bottom-to-top at the lane's valid
/// grid rows. Lanes with fewer than 2 valid rows are skipped (not a polyline).
std::string emit_culane_lines(const std::vector<Lane>& lanes, double width,
                              double height);

/// TuSimple line-delimited JSON: per frame {"lanes": [[x...], ...],
/// "h_samples": [y...], "raw_file": "..."}; -2 marks an absent point.
struct TuSimpleFrame {
  std::vector<Lane> lanes;
  std::vector<double> h_samples;  // pixel y values shared by every lane
  std::string raw_file;
};

std::vector<TuSimpleFrame> parse_tusimple_json(const std::string& text,
                                               double width, double height);
std::string emit_tusimple_json(const std::vector<TuSimpleFrame>& frames,
                               double width, double height);

}  // namespace laneformer
