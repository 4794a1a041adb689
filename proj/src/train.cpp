#include "laneformer/train.hpp"

#include "laneformer/ops.hpp"
#include "laneformer/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace laneformer {

namespace {

// Stream ids forked off the training seed.
constexpr std::uint64_t kOrderStreamId = 1;
constexpr std::uint64_t kPadStreamId = 2;

// Scalar decomposition of the per-frame loss for the metrics log; mirrors
// total_loss but never touches the tape.
void loss_terms(const std::vector<GroundTruthSlot>& gt,
                const std::vector<LanePrediction>& preds,
                const std::vector<Index>& sigma, const MatchWeights& w,
                double& cls, double& loc) {
  cls = 0.0;
  loc = 0.0;
  for (std::size_t n = 0; n < gt.size(); ++n) {
    const LanePrediction& pred = preds[static_cast<std::size_t>(sigma[n])];
    double p = std::max(pred.class_probs.at(gt[n].c), 1e-12);
    cls += -w.w1 * std::log(p);
    if (gt[n].c == 1) {
      loc += location_cost(gt[n].lane, pred, w.w2, w.w3, w.w4);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
  if (lr_backbone < 0.0 || lr_transformer < 0.0) {
    throw Error("TrainConfig: learning rates must be nonnegative");
  }
  if (lr_drop_epoch < 0) throw Error("TrainConfig: lr_drop_epoch must be >= 0");
  if (lr_drop_factor <= 0.0 || lr_drop_factor > 1.0) {
    throw Error("TrainConfig: lr_drop_factor must lie in (0,1]");
  }
  if (clip_norm <= 0.0) throw Error("TrainConfig: clip_norm must be positive");
  if (adapt_beta < 0.0 || adapt_beta >= 1.0) {
    throw Error("TrainConfig: adapt_beta must lie in [0,1)");
  }
  if (adapt_eps <= 0.0) throw Error("TrainConfig: adapt_eps must be positive");
  if (val_every < 1) throw Error("TrainConfig: val_every must be >= 1");
}

AdaptiveOptimizer::AdaptiveOptimizer(Model& model, const TrainConfig& config)
    : beta_(config.adapt_beta), eps_(config.adapt_eps) {
  for (const std::string& name : model.parameter_names()) {
    Tensor param = model.param(name);
    double lr = name.rfind("backbone.", 0) == 0 ? config.lr_backbone
                                                : config.lr_transformer;
    slots_.push_back(Slot{param,
                          std::vector<double>(static_cast<std::size_t>(param.size()), 0.0),
                          lr});
  }
}

double AdaptiveOptimizer::clip(double max_norm) {
  double sum_sq = 0.0;
  for (const Slot& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    for (double g : slot.param.grad()) sum_sq += g * g;
  }
  double norm = std::sqrt(sum_sq);
  if (norm > max_norm && norm > 0.0) {
    double factor = max_norm / norm;
    for (Slot& slot : slots_) {
      if (!slot.param.has_grad()) continue;
      for (double& g : slot.param.ensure_grad()) g *= factor;
    }
  }
  return norm;
}

void AdaptiveOptimizer::step(double lr_scale) {
  for (Slot& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    auto grads = slot.param.grad();
    auto values = slot.param.values_mut();
    double lr = slot.lr * lr_scale;
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grads[i];
      slot.v[i] = beta_ * slot.v[i] + (1.0 - beta_) * g * g;
      values[i] -= lr * g / (std::sqrt(slot.v[i]) + eps_);
    }
  }
}

void AdaptiveOptimizer::zero_grad() {
  for (Slot& slot : slots_) slot.param.zero_grad();
}

std::vector<GroundTruthSlot> slots_for_frame(const LoadedFrame& frame,
                                             Index num_queries) {
  std::vector<GroundTruthSlot> slots;
  slots.reserve(static_cast<std::size_t>(num_queries));
  for (const Lane& lane : frame.lanes) {
    if (static_cast<Index>(slots.size()) == num_queries) break;
    slots.push_back({1, lane});
  }
  while (static_cast<Index>(slots.size()) < num_queries) {
    slots.push_back({0, Lane{}});
  }
  return slots;
}

EvalReport evaluate_frames(const Model& model,
                           const std::vector<LoadedFrame>& frames,
                           double iou_threshold, int jobs) {
  if (jobs < 1) throw Error("evaluate_frames: jobs must be >= 1");
  const ModelConfig& cfg = model.config();
  double width = static_cast<double>(cfg.image_width);
  double height = static_cast<double>(cfg.image_height);
  // Proportional width collapses below a pixel on tiny canvases; the
  // rasterizer needs at least one.
  double line_width = std::max(1.0, scaled_line_width(height));

  auto frame_counts = [&](const LoadedFrame& frame) {
    std::vector<Lane> predicted = model.infer(frame.image, frame.boxes);
    return match_frame(predicted, frame.lanes, width, height, line_width,
                       iou_threshold);
  };

  // Counts are integers, so merging per-worker tallies is order-free and
  // the report cannot depend on the pool size.
  std::map<std::string, MatchCounts> by_tag;
  auto merge = [&by_tag](const std::string& tag, const MatchCounts& counts) {
    MatchCounts& bucket = by_tag[tag.empty() ? "untagged" : tag];
    bucket.tp += counts.tp;
    bucket.fp += counts.fp;
    bucket.fn += counts.fn;
  };
  if (jobs == 1 || frames.size() < 2) {
    for (const LoadedFrame& frame : frames) merge(frame.tag, frame_counts(frame));
  } else {
    std::vector<MatchCounts> per_frame(frames.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < frames.size();
           i = next.fetch_add(1)) {
        per_frame[i] = frame_counts(frames[i]);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    for (std::size_t i = 0; i < frames.size(); ++i) {
      merge(frames[i].tag, per_frame[i]);
    }
  }

  std::map<std::string, EvalReport> reports;
  for (const auto& [tag, counts] : by_tag) {
    reports[tag] = make_report(counts.tp, counts.fp, counts.fn);
  }
  return aggregate(reports);
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::vector<LoadedFrame>& train_frames,
                  const std::vector<LoadedFrame>& val_frames,
                  std::ostream* metrics_log) {
  config.validate();
  if (train_frames.empty()) throw Error("train: training set is empty");
  ModelConfig cfg = model_config;
  cfg.use_row_column = config.row_column;
  cfg.use_detection_attention = config.detection_attention;
  cfg.use_score_weighting = config.use_score_weighting;
  cfg.use_category = config.use_category;

  TrainResult result{Model(cfg, config.seed), {}, {}, false};
  Model& model = result.model;
  model.set_training(true);
  AdaptiveOptimizer optimizer(model, config);
  Rng order_rng = Rng(config.seed).fork(kOrderStreamId);
  Rng pad_rng = Rng(config.seed).fork(kPadStreamId);
  const MatchWeights& weights = cfg.loss_weights;

  long long step_counter = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double lr_scale = epoch >= config.lr_drop_epoch ? config.lr_drop_factor : 1.0;
    std::vector<std::size_t> order(train_frames.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end = std::min(order.size(),
                                 start + static_cast<std::size_t>(config.batch_size));
      double inv = 1.0 / static_cast<double>(end - start);
      optimizer.zero_grad();
      double batch_loss = 0.0, batch_cls = 0.0, batch_loc = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const LoadedFrame& frame = train_frames[order[i]];
        std::vector<DetectionBox> boxes;
        if (cfg.use_detection_attention) {
          boxes = select_and_pad(frame.boxes, cfg.num_boxes,
                                 cfg.detection_score_threshold,
                                 pad_rng.next_u64());
        }
        std::vector<GroundTruthSlot> gt = slots_for_frame(frame, cfg.num_queries);

        try {
          GradTape tape;
          Model::ForwardResult out = model.forward(frame.image, boxes);
          std::vector<Index> sigma =
              hungarian(pairwise_cost(gt, out.predictions, weights)).sigma;
          Tensor loss =
              scale(total_loss(gt, out.predictions, sigma, weights), inv);
          double loss_value = loss.item();
          if (!std::isfinite(loss_value)) {
            throw NumericError("total loss is non-finite");
          }
          double cls = 0.0, loc = 0.0;
          loss_terms(gt, out.predictions, sigma, weights, cls, loc);
          batch_loss += loss_value;
          batch_cls += cls * inv;
          batch_loc += loc * inv;
          tape.backward(loss);
        } catch (const NumericError& e) {
          model.save_checkpoint(config.nan_snapshot_path);
          throw TrainAbort("non-finite value at step " +
                           std::to_string(step_counter) + " (frame " +
                           frame.frame_id + "): " + e.what() +
                           "; diagnostic snapshot written to " +
                           config.nan_snapshot_path);
        }
      }
      double grad_norm = optimizer.clip(config.clip_norm);
      optimizer.step(lr_scale);

      StepLog entry{step_counter, epoch,    batch_loss, batch_cls,
                    batch_loc,    grad_norm, lr_scale};
      if (metrics_log) {
        nlohmann::json j;
        j["type"] = "step";
        j["step"] = entry.step;
        j["epoch"] = entry.epoch;
        j["loss"] = entry.loss;
        j["cls"] = entry.loss_cls;
        j["loc"] = entry.loss_loc;
        j["grad_norm"] = entry.grad_norm;
        j["lr_scale"] = entry.lr_scale;
        *metrics_log << j.dump() << "\n";
      }
      result.steps.push_back(entry);
      epoch_loss += batch_loss;
      ++batches;
      ++step_counter;
    }

    EpochLog epoch_entry;
    epoch_entry.epoch = epoch;
    epoch_entry.mean_loss = epoch_loss / static_cast<double>(std::max(batches, 1));
    bool run_val = !val_frames.empty() &&
                   (epoch % config.val_every == 0 || epoch == config.epochs - 1);
    if (run_val) {
      epoch_entry.val = evaluate_frames(model, val_frames);
      epoch_entry.has_val = true;
    }
    if (metrics_log) {
      nlohmann::json j;
      j["type"] = "epoch";
      j["epoch"] = epoch_entry.epoch;
      j["mean_loss"] = epoch_entry.mean_loss;
      if (epoch_entry.has_val) {
        j["val_f1"] = epoch_entry.val.f1;
        j["val_precision"] = epoch_entry.val.precision;
        j["val_recall"] = epoch_entry.val.recall;
        j["val_tp"] = epoch_entry.val.tp;
        j["val_fp"] = epoch_entry.val.fp;
        j["val_fn"] = epoch_entry.val.fn;
      }
      *metrics_log << j.dump() << "\n";
    }
    result.epochs.push_back(epoch_entry);
    if (epoch_entry.has_val && config.early_stop_f1 >= 0.0 &&
        epoch_entry.val.f1 >= config.early_stop_f1) {
      result.early_stopped = true;
      break;
    }
  }
  model.set_training(false);
  return result;
}

std::vector<AblationRow> ablation_suite(const ModelConfig& model_config,
                                        const TrainConfig& config,
                                        const std::vector<LoadedFrame>& train_frames,
                                        const std::vector<LoadedFrame>& val_frames,
                                        std::ostream* metrics_log) {
  struct RowSpec {
    const char* name;
    bool rc, det, score, cat;
  };
  // Cumulative switch lattice, one row per added component.
  static constexpr RowSpec kRows[] = {
      {"baseline", false, false, false, false},
      {"+ row-column attention", true, false, false, false},
      {"+ bounding box", true, true, false, false},
      {"+ score", true, true, true, false},
      {"+ category", true, true, true, true},
  };
  std::vector<AblationRow> rows;
  for (const RowSpec& spec : kRows) {
    TrainConfig run = config;
    run.row_column = spec.rc;
    run.detection_attention = spec.det;
    run.use_score_weighting = spec.score;
    run.use_category = spec.cat;
    TrainResult trained =
        train(model_config, run, train_frames, val_frames, metrics_log);
    AblationRow row;
    row.name = spec.name;
    row.row_column = spec.rc;
    row.detection_attention = spec.det;
    row.use_score_weighting = spec.score;
    row.use_category = spec.cat;
    row.report = evaluate_frames(trained.model, val_frames);
    if (metrics_log) {
      nlohmann::json j;
      j["type"] = "ablation";
      j["row"] = row.name;
      j["f1"] = row.report.f1;
      j["precision"] = row.report.precision;
      j["recall"] = row.report.recall;
      *metrics_log << j.dump() << "\n";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-26s %10s %10s %10s\n", "configuration",
                "f1", "precision", "recall");
  out << line;
  for (const AblationRow& row : rows) {
    std::snprintf(line, sizeof line, "%-26s %10.4f %10.4f %10.4f\n",
                  row.name.c_str(), row.report.f1, row.report.precision,
                  row.report.recall);
    out << line;
  }
  return out.str();
}

}  // namespace laneformer
