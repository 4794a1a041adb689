// Toy training loop: two learning-rate groups with a step drop, adaptive
// per-parameter scaling, gradient accumulation and clipping, per-epoch
// validation, and the ablation-switch harness.
#pragma once

#include "laneformer/matching.hpp"
#include "laneformer/metrics.hpp"
#include "laneformer/model.hpp"
#include "laneformer/scenes.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace laneformer {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double lr_backbone = 1e-4;
  double lr_transformer = 1e-5;
  int lr_drop_epoch = 80;       // multiply both rates by lr_drop_factor here
  double lr_drop_factor = 0.1;
  double clip_norm = 1.0;       // global gradient-norm ceiling
  std::uint64_t seed = 1;
  // Adaptive-step state: squared-gradient averaging and its guard.
  double adapt_beta = 0.99;
  double adapt_eps = 1e-8;
  // Ablation switches, applied onto the model config by train().
  bool row_column = true;
  bool detection_attention = true;
  bool use_score_weighting = true;
  bool use_category = true;
  // Stop once validation F1 reaches this value (negative disables).
  double early_stop_f1 = -1.0;
  int val_every = 1;  // evaluate every k-th epoch (and always the last)
  std::string nan_snapshot_path = "train_nan_snapshot.ckpt";

  void validate() const;  // throws Error on nonsense values
};

/// First-order adaptive optimizer: per-parameter squared-gradient average
/// v <- beta*v + (1-beta)*g^2, update theta -= lr * g / (sqrt(v) + eps),
/// with "backbone.*" parameters on lr_backbone and the rest on
/// lr_transformer.
class AdaptiveOptimizer {
 public:
  AdaptiveOptimizer(Model& model, const TrainConfig& config);

  /// Scales every accumulated gradient so the global norm is at most
  /// max_norm; returns the pre-clip norm.
  double clip(double max_norm);
  /// Applies one update; lr_scale multiplies both group rates.
  void step(double lr_scale);
  void zero_grad();

 private:
  struct Slot {
    Tensor param;
    std::vector<double> v;  // squared-gradient average
    double lr;
  };
  std::vector<Slot> slots_;
  double beta_, eps_;
};

struct StepLog {
  long long step = 0;
  int epoch = 0;
  double loss = 0.0;      // batch mean of the total loss
  double loss_cls = 0.0;  // classification term of that mean
  double loss_loc = 0.0;  // location term of that mean
  double grad_norm = 0.0; // pre-clip global norm
  double lr_scale = 1.0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  bool has_val = false;
  EvalReport val;
};

struct TrainResult {
  Model model;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  bool early_stopped = false;
};

/// Ground-truth slots for one frame: lanes first, padded to num_queries
/// with background slots.
std::vector<GroundTruthSlot> slots_for_frame(const LoadedFrame& frame,
                                             Index num_queries);

/// Inference + rasterized-IoU matching over a frame list, with per-tag
/// breakdown. `jobs` sizes a worker pool over frames; the report does not
/// depend on it.
EvalReport evaluate_frames(const Model& model,
                           const std::vector<LoadedFrame>& frames,
                           double iou_threshold = 0.5, int jobs = 1);

/// Runs the full loop. The metrics log, when given, receives one JSON line
/// per step and per epoch. Throws TrainAbort on a non-finite loss, after
/// writing a diagnostic checkpoint to config.nan_snapshot_path.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::vector<LoadedFrame>& train_frames,
                  const std::vector<LoadedFrame>& val_frames,
                  std::ostream* metrics_log = nullptr);

struct AblationRow {
  std::string name;  // Table-3-style cumulative label
  bool row_column = false;
  bool detection_attention = false;
  bool use_score_weighting = false;
  bool use_category = false;
  EvalReport report;
};

/// Trains one model per switch-lattice row (baseline, + row-column,
/// + bounding box, + score, + category) and evaluates each on the
/// validation frames.
std::vector<AblationRow> ablation_suite(const ModelConfig& model_config,
                                        const TrainConfig& config,
                                        const std::vector<LoadedFrame>& train_frames,
                                        const std::vector<LoadedFrame>& val_frames,
                                        std::ostream* metrics_log = nullptr);

/// Fixed-width text rendering of the ablation table.
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace laneformer
