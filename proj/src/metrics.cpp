#include "laneformer/metrics.hpp"

#include "laneformer/matching.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace laneformer {

namespace {

struct PointF {
  double x, y;
};

std::vector<PointF> lane_polyline(const Lane& lane, double width, double height) {
  std::vector<PointF> pts;
  for (Index row = 0; row < kGridRows; ++row) {
    if (!lane.row_valid(row)) continue;
    pts.push_back({lane.xs[static_cast<std::size_t>(row)] * width,
                   grid_y(row) * height});
  }
  return pts;
}

double dist_to_segment_sq(double px, double py, const PointF& a, const PointF& b) {
  double dx = b.x - a.x, dy = b.y - a.y;
  double len_sq = dx * dx + dy * dy;
  double t = 0.0;
  if (len_sq > 0.0) {
    t = ((px - a.x) * dx + (py - a.y) * dy) / len_sq;
    t = std::clamp(t, 0.0, 1.0);
  }
  double ex = px - (a.x + t * dx), ey = py - (a.y + t * dy);
  return ex * ex + ey * ey;
}

/// Marks every integer lattice point within line_width/2 of the polyline.
void rasterize(const std::vector<PointF>& pts, Index width, Index height,
               double radius, std::vector<std::uint8_t>& mask) {
  double r_sq = radius * radius;
  auto stamp = [&](const PointF& a, const PointF& b) {
    Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.x, b.x) - radius)));
    Index x1 = std::min<Index>(width - 1, static_cast<Index>(std::ceil(std::max(a.x, b.x) + radius)));
    Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.y, b.y) - radius)));
    Index y1 = std::min<Index>(height - 1, static_cast<Index>(std::ceil(std::max(a.y, b.y) + radius)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        if (mask[static_cast<std::size_t>(y * width + x)]) continue;
        if (dist_to_segment_sq(static_cast<double>(x), static_cast<double>(y), a, b) <= r_sq) {
          mask[static_cast<std::size_t>(y * width + x)] = 1;
        }
      }
    }
  };
  if (pts.size() == 1) {
    stamp(pts[0], pts[0]);  // a single disc
    return;
  }
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) stamp(pts[i], pts[i + 1]);
}

}  // namespace

double lane_iou(const Lane& a, const Lane& b, Index width, Index height,
                double line_width) {
  if (line_width < 1.0) throw Error("lane_iou: line_width must be >= 1");
  if (width <= 0 || height <= 0) throw Error("lane_iou: empty canvas");
  auto pa = lane_polyline(a, static_cast<double>(width), static_cast<double>(height));
  auto pb = lane_polyline(b, static_cast<double>(width), static_cast<double>(height));
  if (pa.empty() || pb.empty()) return 0.0;

  std::vector<std::uint8_t> ma(static_cast<std::size_t>(width * height), 0);
  std::vector<std::uint8_t> mb(static_cast<std::size_t>(width * height), 0);
  double radius = line_width / 2.0;
  rasterize(pa, width, height, radius, ma);
  rasterize(pb, width, height, radius, mb);

  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    if (ma[i] && mb[i]) ++inter;
    if (ma[i] || mb[i]) ++uni;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MatchCounts match_frame(const std::vector<Lane>& preds,
                        const std::vector<Lane>& gts, Index width,
                        Index height, double line_width, double iou_threshold) {
  MatchCounts counts;
  const Index np = static_cast<Index>(preds.size());
  const Index ng = static_cast<Index>(gts.size());
  if (np == 0 || ng == 0) {
    counts.fp = np;
    counts.fn = ng;
    return counts;
  }

  // Square cost on -IoU; missing rows/columns pad with IoU 0.
  const Index n = std::max(np, ng);
  CostMatrix cost;
  cost.n = n;
  cost.values.assign(static_cast<std::size_t>(n * n), 0.0);
  for (Index g = 0; g < ng; ++g) {
    for (Index p = 0; p < np; ++p) {
      cost.at(g, p) = -lane_iou(gts[static_cast<std::size_t>(g)],
                                preds[static_cast<std::size_t>(p)], width,
                                height, line_width);
    }
  }
  MatchAssignment assignment = hungarian(cost);
  for (Index g = 0; g < ng; ++g) {
    Index p = assignment.sigma[static_cast<std::size_t>(g)];
    if (p < np && -cost.at(g, p) >= iou_threshold) ++counts.tp;
  }
  counts.fp = np - counts.tp;
  counts.fn = ng - counts.tp;
  return counts;
}

EvalReport make_report(long long tp, long long fp, long long fn) {
  EvalReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  double pr = r.precision + r.recall;
  r.f1 = pr > 0.0 ? 2.0 * r.precision * r.recall / pr : 0.0;
  return r;
}

EvalReport aggregate(const std::map<std::string, EvalReport>& by_category) {
  long long tp = 0, fp = 0, fn = 0;
  for (const auto& [name, rep] : by_category) {
    tp += rep.tp;
    fp += rep.fp;
    fn += rep.fn;
  }
  EvalReport total = make_report(tp, fp, fn);
  total.by_category = by_category;
  return total;
}

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  j["tp"] = report.tp;
  j["fp"] = report.fp;
  j["fn"] = report.fn;
  j["precision"] = report.precision;
  j["recall"] = report.recall;
  j["f1"] = report.f1;
  if (!report.by_category.empty()) {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [name, rep] : report.by_category) {
      cats[name] = {{"tp", rep.tp},       {"fp", rep.fp},
                    {"fn", rep.fn},       {"precision", rep.precision},
                    {"recall", rep.recall}, {"f1", rep.f1}};
    }
    j["categories"] = std::move(cats);
  }
  return j.dump();
}

std::string report_table(const EvalReport& report) {
  std::ostringstream out;
  auto row = [&](const std::string& name, const EvalReport& r) {
    char line[160];
    std::snprintf(line, sizeof line,
                  "%-12s %8lld %8lld %8lld %10.4f %10.4f %10.4f\n",
                  name.c_str(), r.tp, r.fp, r.fn, r.precision, r.recall, r.f1);
    out << line;
  };
  out << "Category           TP       FP       FN  Precision     Recall         F1\n";
  for (const auto& [name, rep] : report.by_category) row(name, rep);
  row("Total", report);
  return out.str();
}

TuSimpleResult tusimple_metrics(const std::vector<TuSimpleFrame>& preds,
                                const std::vector<TuSimpleFrame>& gts,
                                double width, double height,
                                double pixel_threshold, double match_threshold) {
  if (preds.size() != gts.size()) {
    throw Error("tusimple_metrics: " + std::to_string(preds.size()) +
                " prediction frames vs " + std::to_string(gts.size()) +
                " ground-truth frames");
  }

  // Pixel x at a pixel y, or "absent" (outside the lane's span).
  auto sample = [&](const Lane& lane, double y_px, double& x_px) {
    double y = y_px / height;
    if (y < lane.s - 1e-6 || y > lane.e + 1e-6) return false;
    x_px = lane.x_at(y) * width;
    return true;
  };

  long long total_gt_points = 0, correct_points = 0;
  long long gt_lanes = 0, pred_lanes = 0, matched = 0;

  for (std::size_t f = 0; f < gts.size(); ++f) {
    const TuSimpleFrame& gt = gts[f];
    const TuSimpleFrame& pr = preds[f];
    if (!gt.raw_file.empty() && !pr.raw_file.empty() && gt.raw_file != pr.raw_file) {
      throw Error("tusimple_metrics: frame " + std::to_string(f) +
                  " names disagree: '" + pr.raw_file + "' vs '" + gt.raw_file + "'");
    }
    gt_lanes += static_cast<long long>(gt.lanes.size());
    pred_lanes += static_cast<long long>(pr.lanes.size());

    // Per-pair correct-point counts on the gt frame's h_samples.
    const Index ng = static_cast<Index>(gt.lanes.size());
    const Index np = static_cast<Index>(pr.lanes.size());
    std::vector<long long> gt_points(static_cast<std::size_t>(ng), 0);
    std::vector<std::vector<long long>> pair_correct(
        static_cast<std::size_t>(ng),
        std::vector<long long>(static_cast<std::size_t>(np), 0));
    for (Index g = 0; g < ng; ++g) {
      const Lane& glane = gt.lanes[static_cast<std::size_t>(g)];
      for (double y_px : gt.h_samples) {
        double gx;
        if (!sample(glane, y_px, gx)) continue;
        ++gt_points[static_cast<std::size_t>(g)];
        for (Index p = 0; p < np; ++p) {
          double px;
          if (sample(pr.lanes[static_cast<std::size_t>(p)], y_px, px) &&
              std::abs(px - gx) < pixel_threshold) {
            ++pair_correct[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
          }
        }
      }
      total_gt_points += gt_points[static_cast<std::size_t>(g)];
    }

    if (ng == 0 || np == 0) continue;

    // One-to-one assignment maximizing correct points.
    const Index n = std::max(ng, np);
    CostMatrix cost;
    cost.n = n;
    cost.values.assign(static_cast<std::size_t>(n * n), 0.0);
    for (Index g = 0; g < ng; ++g)
      for (Index p = 0; p < np; ++p)
        cost.at(g, p) = -static_cast<double>(
            pair_correct[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)]);
    MatchAssignment assignment = hungarian(cost);
    for (Index g = 0; g < ng; ++g) {
      Index p = assignment.sigma[static_cast<std::size_t>(g)];
      if (p >= np || gt_points[static_cast<std::size_t>(g)] == 0) continue;
      long long c = pair_correct[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
      double acc = static_cast<double>(c) /
                   static_cast<double>(gt_points[static_cast<std::size_t>(g)]);
      if (acc > match_threshold) {
        ++matched;
        correct_points += c;
      }
    }
  }

  TuSimpleResult result;
  result.accuracy = total_gt_points > 0
                        ? static_cast<double>(correct_points) /
                              static_cast<double>(total_gt_points)
                        : 0.0;
  result.fp_rate = pred_lanes > 0
                       ? static_cast<double>(pred_lanes - matched) /
                             static_cast<double>(pred_lanes)
                       : 0.0;
  result.fn_rate = gt_lanes > 0
                       ? static_cast<double>(gt_lanes - matched) /
                             static_cast<double>(gt_lanes)
                       : 0.0;
  return result;
}

}  // namespace laneformer
