// The full network: toy strided backbone, row/column + detection-attention
// encoder, query decoder, and prediction heads, with named parameters and a
// self-describing checkpoint format.
#pragma once

#include "laneformer/attention.hpp"
#include "laneformer/detection.hpp"
#include "laneformer/matching.hpp"
#include "laneformer/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace laneformer {

struct ModelConfig {
  Index d_prime = 64;       // shared attention width d'
  Index num_queries = 25;   // N
  Index num_boxes = 10;     // M detection slots
  Index encoder_layers = 1;
  Index decoder_layers = 1;
  Index heads = 1;          // heads in the traditional attention blocks
  Index roi_size = 3;
  Index feature_stage = 1;  // backbone stage the transformer reads (C4 analog)
  Index ffn_hidden = 128;
  // Input resolution the model is built for. The row/column reduction
  // weights are sized from the working-stage extents, so this is a model
  // property, not a runtime argument.
  Index image_height = 64;
  Index image_width = 128;
  std::vector<Index> backbone_widths = {8, 16, 32};  // one conv per stage
  double score_threshold_infer = 0.8;   // lane-probability cut at inference
  double detection_score_threshold = 0.6;  // select_and_pad cut
  MatchWeights loss_weights;            // omega_1..omega_4
  // Ablation switches (Laneformer* wiring). Disabling a block removes its
  // parameters entirely.
  bool use_detection_attention = true;
  bool use_row_column = true;
  bool use_category = true;
  bool use_score_weighting = true;

  /// Total spatial stride of the full backbone (2 per stage).
  Index total_stride() const { return Index{1} << backbone_widths.size(); }
  /// Stride of the configured working stage.
  Index stage_stride() const { return Index{2} << feature_stage; }

  void validate() const;  // throws Error on nonsense values
};

struct BackboneOut {
  std::vector<Tensor> stages;  // rank-3 (h, w, c), halving per stage
  Tensor h_f;                  // the working stage
  Tensor h_r;                  // h x (w*d) row tokens of h_f
  Tensor h_c;                  // w x (h*d) column tokens of h_f
  Index h = 0, w = 0, d = 0;   // working-stage extents
};

class Model {
 public:
  /// Fresh model with seeded random initialization.
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Named parameters in registration (= checkpoint) order.
  const std::vector<std::string>& parameter_names() const { return order_; }
  Tensor param(const std::string& name) const;
  Index parameter_count() const;
  /// Marks every parameter as requiring gradients (training mode).
  void set_training(bool on);

  BackboneOut backbone_forward(const Tensor& image) const;

  /// Builds Z_b / Z_r from exactly M pre-selected boxes on the working
  /// stage. Requires use_detection_attention.
  RoiEmbeddingResult detection_embeddings(const BackboneOut& features,
                                          const std::vector<DetectionBox>& boxes,
                                          double image_w, double image_h,
                                          Tensor& z_b_out) const;

  /// Figure-2 encoder: per pixel, self-attention + pixel-to-Bbox +
  /// broadcast row/column attention, residual + layer norm, feed-forward.
  /// Pass undefined z_b/z_r when detection attention is disabled.
  Tensor encoder_forward(const BackboneOut& features, const Tensor& z_b,
                         const Tensor& z_r,
                         std::map<std::string, Tensor>* attention) const;

  /// Query self-attention, cross-attention over memory (2-D positions on
  /// the keys), query-to-Bbox, feed-forward. Returns N x d' features.
  Tensor decoder_forward(const Tensor& memory, Index h, Index w,
                         const Tensor& z_b, const Tensor& z_r,
                         std::map<std::string, Tensor>* attention) const;

  /// Classification softmax and the 3-layer regression MLP (74 sigmoids).
  std::vector<LanePrediction> predict_heads(const Tensor& query_features) const;

  struct ForwardResult {
    std::vector<LanePrediction> predictions;
    Tensor memory;
    Tensor query_features;
    std::map<std::string, Tensor> attention;  // retained weight matrices
    int degenerate_boxes = 0;
  };
  /// Full forward over one image and its (already padded) M boxes. The box
  /// list must have exactly config.num_boxes entries (use select_and_pad).
  ForwardResult forward(const Tensor& image,
                        const std::vector<DetectionBox>& boxes) const;

  /// Threshold p(lane) at score_threshold_infer and convert the survivors
  /// to lanes; spans with e < s produce no lane. Raw detections are reduced
  /// with select_and_pad under a fixed padding seed.
  std::vector<Lane> infer(const Tensor& image,
                          const std::vector<DetectionBox>& detections) const;

  void save_checkpoint(const std::string& path) const;
  static Model load_checkpoint(const std::string& path);

 private:
  Model() = default;
  void register_params(std::uint64_t seed);
  Tensor p(const std::string& name) const;  // param lookup, throws if absent
  MhaWeights mha(const std::string& prefix) const;
  Tensor ffn(const Tensor& x, const std::string& prefix) const;

  ModelConfig config_;
  std::vector<std::string> order_;
  std::map<std::string, Tensor> params_;
};

/// Fixed seed for inference-time padding so reruns are byte-identical.
inline constexpr std::uint64_t kInferencePadSeed = 0x1a7ef0acedull;

}  // namespace laneformer
