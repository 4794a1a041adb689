#include "laneformer/detection.hpp"

#include "laneformer/error.hpp"
#include "laneformer/ops.hpp"
#include "laneformer/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace laneformer {

namespace {

const char* kCategoryNames[kNumCategories] = {
    "padded", "person", "rider", "car", "truck", "bus", "motorcycle"};

std::string format_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

}  // namespace

std::string category_name(Category c) {
  int i = static_cast<int>(c);
  if (i < 0 || i >= kNumCategories) {
    throw Error("unknown category index " + std::to_string(i));
  }
  return kCategoryNames[i];
}

Category category_from_token(const std::string& token) {
  for (int i = 0; i < kNumCategories; ++i) {
    if (token == kCategoryNames[i]) return static_cast<Category>(i);
  }
  try {
    std::size_t used = 0;
    int i = std::stoi(token, &used);
    if (used == token.size() && i >= 0 && i < kNumCategories) {
      return static_cast<Category>(i);
    }
  } catch (const std::exception&) {
  }
  throw Error("unknown category '" + token + "'");
}

std::vector<DetectionBox> select_and_pad(const std::vector<DetectionBox>& boxes,
                                         Index m, double score_threshold,
                                         std::uint64_t rng_seed) {
  if (m < 1) {
    throw Error("select_and_pad: M must be >= 1");
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (boxes[i].score >= score_threshold) keep.push_back(i);
  }
  if (static_cast<Index>(keep.size()) > m) {
    // Highest M scores win; stable sort keeps input order among ties, and
    // re-sorting the survivors restores input order in the output.
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
      return boxes[a].score > boxes[b].score;
    });
    keep.resize(static_cast<std::size_t>(m));
    std::sort(keep.begin(), keep.end());
  }

  std::vector<DetectionBox> out;
  out.reserve(static_cast<std::size_t>(m));
  for (std::size_t i : keep) out.push_back(boxes[i]);

  Rng rng(rng_seed);
  while (static_cast<Index>(out.size()) < m) {
    DetectionBox pad;
    double w = rng.uniform(0.05, 0.3);
    double h = rng.uniform(0.05, 0.3);
    pad.x1 = rng.uniform(0.0, 1.0 - w);
    pad.y1 = rng.uniform(0.0, 1.0 - h);
    pad.x2 = pad.x1 + w;
    pad.y2 = pad.y1 + h;
    pad.score = 0.0;
    pad.category = Category::padded;
    out.push_back(pad);
  }
  return out;
}

std::vector<double> encode_box(const DetectionBox& box, bool use_category) {
  std::vector<double> v(static_cast<std::size_t>(kBoxEncodingDim), 0.0);
  v[0] = box.x1;
  v[1] = box.y1;
  v[2] = box.x2;
  v[3] = box.y2;
  if (use_category) {
    v[4 + static_cast<std::size_t>(box.category)] = 1.0;
  }
  return v;
}

Tensor encode_boxes(const std::vector<DetectionBox>& boxes, bool use_category) {
  if (boxes.empty()) {
    throw Error("encode_boxes: empty box list (padding guarantees M >= 1)");
  }
  std::vector<double> data;
  data.reserve(boxes.size() * static_cast<std::size_t>(kBoxEncodingDim));
  for (const DetectionBox& box : boxes) {
    std::vector<double> row = encode_box(box, use_category);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::from_values({static_cast<Index>(boxes.size()), kBoxEncodingDim},
                             std::move(data));
}

Tensor bbox_embeddings(const std::vector<DetectionBox>& boxes, const Tensor& w,
                       const Tensor& b, bool use_category) {
  return relu(linear(encode_boxes(boxes, use_category), w, b));
}

RoiEmbeddingResult roi_embeddings(const Tensor& f,
                                  const std::vector<DetectionBox>& boxes,
                                  double image_w, double image_h,
                                  double spatial_scale, Index roi_size,
                                  const Tensor& w, const Tensor& b,
                                  bool use_score_weighting) {
  if (boxes.empty()) {
    throw Error("roi_embeddings: empty box list (padding guarantees M >= 1)");
  }
  Index flat_dim = roi_size * roi_size * f.dim(2);
  if (w.rank() != 2 || w.dim(0) != flat_dim) {
    throw ShapeError("roi_embeddings: weight " + shape_to_string(w.shape()) +
                     " does not accept flattened ROI size " +
                     std::to_string(flat_dim));
  }
  RoiEmbeddingResult result;
  std::vector<Tensor> rows;
  rows.reserve(boxes.size());
  for (const DetectionBox& box : boxes) {
    double weight = use_score_weighting ? box.score : 1.0;
    bool degenerate = !(box.x2 > box.x1) || !(box.y2 > box.y1);
    if (degenerate) ++result.degenerate_boxes;
    if (degenerate || weight == 0.0) {
      // Exactly zero pre-perceptron feature; skips sampling entirely.
      rows.push_back(Tensor::zeros({1, flat_dim}));
      continue;
    }
    BoxPx px{box.x1 * image_w, box.y1 * image_h, box.x2 * image_w,
             box.y2 * image_h};
    Tensor roi = roi_align(f, px, roi_size, spatial_scale);
    Tensor flat = reshape(roi, {1, flat_dim});
    rows.push_back(weight == 1.0 ? flat : scale(flat, weight));
  }
  result.z_r = relu(linear(concat_rows(rows), w, b));
  return result;
}

std::map<std::string, std::vector<DetectionBox>> parse_detections(
    const std::string& text) {
  std::map<std::string, std::vector<DetectionBox>> frames;
  std::istringstream stream(text);
  std::string line;
  long line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line[0] == '#') continue;
    std::istringstream ls(line);
    std::string frame_id, cat_tok;
    double x1, y1, x2, y2, score;
    if (!(ls >> frame_id >> x1 >> y1 >> x2 >> y2 >> score >> cat_tok)) {
      throw ParseError("expected 'frame_id x1 y1 x2 y2 score category'", line_no);
    }
    std::string extra;
    if (ls >> extra) {
      throw ParseError("trailing token '" + extra + "'", line_no);
    }
    DetectionBox box;
    box.x1 = x1;
    box.y1 = y1;
    box.x2 = x2;
    box.y2 = y2;
    box.score = score;
    try {
      box.category = category_from_token(cat_tok);
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no);
    }
    if (!(box.x1 < box.x2) || !(box.y1 < box.y2)) {
      throw ParseError("box corners must satisfy x1 < x2 and y1 < y2", line_no);
    }
    if (box.score < 0.0 || box.score > 1.0) {
      throw ParseError("score outside [0, 1]", line_no);
    }
    frames[frame_id].push_back(box);
  }
  return frames;
}

std::string emit_detections(
    const std::map<std::string, std::vector<DetectionBox>>& frames) {
  std::string out;
  for (const auto& [frame_id, boxes] : frames) {
    for (const DetectionBox& box : boxes) {
      out += frame_id;
      out += ' ';
      out += format_num(box.x1);
      out += ' ';
      out += format_num(box.y1);
      out += ' ';
      out += format_num(box.x2);
      out += ' ';
      out += format_num(box.y2);
      out += ' ';
      out += format_num(box.score);
      out += ' ';
      out += category_name(box.category);
      out += '\n';
    }
  }
  return out;
}

}  // namespace laneformer
