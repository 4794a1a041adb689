// Detection processing: fixed-size box sets, the 11-dim box encoding, and
// the Z_b / Z_r embedding matrices consumed by detection attention.
#pragma once

#include "laneformer/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace laneformer {

/// Index 0 is the padded slot; the six real classes are the BDD100K
/// person/vehicle categories (only the cardinality matters to the math).
enum class Category : int {
  padded = 0,
  person = 1,
  rider = 2,
  car = 3,
  truck = 4,
  bus = 5,
  motorcycle = 6,
};

inline constexpr int kNumCategories = 7;  // padded + 6 real
inline constexpr Index kBoxEncodingDim = 11;  // 4 corners + 7-way one-hot

std::string category_name(Category c);
/// Accepts either the category name or its integer index.
Category category_from_token(const std::string& token);

struct DetectionBox {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;  // normalized corners
  double score = 0.0;                              // exactly 0 for padded
  Category category = Category::padded;
};

/// Reduces an arbitrary detection list to exactly M slots: boxes under
/// `score_threshold` are dropped; if more than M remain, the M highest
/// scores win (ties by input order) with input order preserved; if fewer,
/// seeded-random padded boxes (score 0, min size 0.05) fill the tail.
std::vector<DetectionBox> select_and_pad(const std::vector<DetectionBox>& boxes,
                                         Index m, double score_threshold,
                                         std::uint64_t rng_seed);

/// [x1, y1, x2, y2] ++ one-hot(category); with use_category=false the one-hot
/// portion stays zero (the "+ category" ablation).
std::vector<double> encode_box(const DetectionBox& box, bool use_category = true);

/// Stacks encode_box rows into an M x 11 constant tensor.
Tensor encode_boxes(const std::vector<DetectionBox>& boxes, bool use_category = true);

/// Z_b = relu(encode_boxes(boxes) * W + b); W is 11 x d', b is d'.
Tensor bbox_embeddings(const std::vector<DetectionBox>& boxes, const Tensor& w,
                       const Tensor& b, bool use_category = true);

struct RoiEmbeddingResult {
  Tensor z_r;                // M x d'
  int degenerate_boxes = 0;  // boxes that collapsed to zero features
};

/// Z_r rows: roi_align the box on feature map `f` (image size image_w x
/// image_h, feature stride 1/spatial_scale), flatten, weight by the box
/// score, then a perceptron with ReLU. Zero-score boxes contribute an exactly
/// zero pre-perceptron feature; degenerate boxes are zeroed and counted.
/// W is (roi_size^2 * feature_channels) x d', b is d'.
RoiEmbeddingResult roi_embeddings(const Tensor& f,
                                  const std::vector<DetectionBox>& boxes,
                                  double image_w, double image_h,
                                  double spatial_scale, Index roi_size,
                                  const Tensor& w, const Tensor& b,
                                  bool use_score_weighting = true);

/// Detection input file: one record per line,
/// "frame_id x1 y1 x2 y2 score category", normalized coordinates.
std::map<std::string, std::vector<DetectionBox>> parse_detections(
    const std::string& text);
std::string emit_detections(
    const std::map<std::string, std::vector<DetectionBox>>& frames);

}  // namespace laneformer
