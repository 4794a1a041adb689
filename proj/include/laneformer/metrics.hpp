// Evaluation: rasterized lane IoU, per-frame F1 counting, TuSimple-style
// point accuracy, and report aggregation.
#pragma once

#include "laneformer/lane.hpp"

#include <map>
#include <string>
#include <vector>

namespace laneformer {

/// The de facto CULane protocol draws 30 px wide lanes on a 590 px tall
/// canvas; other canvas heights scale the width proportionally.
inline constexpr double kLineWidthPx = 30.0;
inline constexpr double kLineWidthReferenceHeight = 590.0;

inline double scaled_line_width(double image_height) {
  return kLineWidthPx * image_height / kLineWidthReferenceHeight;
}

/// IoU of the two lanes rasterized as line_width-wide polylines on an
/// integer pixel lattice (round caps and joins). A lane with no valid rows
/// has IoU 0 against anything.
double lane_iou(const Lane& a, const Lane& b, Index width, Index height,
                double line_width);

struct MatchCounts {
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;
};

/// One-to-one matching of predictions to ground truth by minimum-cost
/// assignment on -IoU; pairs at IoU >= iou_threshold count as true
/// positives, the rest as FP (extra predictions) / FN (missed lanes).
MatchCounts match_frame(const std::vector<Lane>& preds,
                        const std::vector<Lane>& gts, Index width,
                        Index height, double line_width,
                        double iou_threshold = 0.5);

struct EvalReport {
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;
  double precision = 0.0;  // tp / (tp + fp), 0 on empty denominator
  double recall = 0.0;     // tp / (tp + fn), 0 on empty denominator
  double f1 = 0.0;         // 2PR / (P + R), 0 when P + R = 0
  std::map<std::string, EvalReport> by_category;
};

/// Fills the derived rates from raw counts.
EvalReport make_report(long long tp, long long fp, long long fn);

/// Totals are the category-count sums, with the inputs kept as breakdown.
EvalReport aggregate(const std::map<std::string, EvalReport>& by_category);

/// Single-line JSON ({"tp":..,"fp":..,...,"categories":{...}}).
std::string report_json(const EvalReport& report);
/// Fixed-width table, one row per category plus a Total row.
std::string report_table(const EvalReport& report);

struct TuSimpleResult {
  double accuracy = 0.0;  // matched correct points / total gt points
  double fp_rate = 0.0;   // unmatched prediction lanes / prediction lanes
  double fn_rate = 0.0;   // unmatched gt lanes / gt lanes
};

/// TuSimple protocol: a point is correct when the predicted x at the same
/// h_sample is within pixel_threshold; a lane matches when its point
/// accuracy exceeds match_threshold. Frames are compared index-by-index and
/// must agree in count and raw_file naming.
TuSimpleResult tusimple_metrics(const std::vector<TuSimpleFrame>& preds,
                                const std::vector<TuSimpleFrame>& gts,
                                double width, double height,
                                double pixel_threshold = 20.0,
                                double match_threshold = 0.85);

}  // namespace laneformer
