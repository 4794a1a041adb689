// laneformer: one executable for the whole pipeline — synthetic data
// generation, training, evaluation, inference, attention dumping, gradient
// self-checks, and the ablation harness. Every run resolves its options
// (flags override the key=value config file), executes, and records a
// run_manifest.json describing exactly what it did.
#include <CLI11.hpp>
#include <json.hpp>

#include "laneformer/gradcheck.hpp"
#include "laneformer/matching.hpp"
#include "laneformer/metrics.hpp"
#include "laneformer/model.hpp"
#include "laneformer/ops.hpp"
#include "laneformer/rng.hpp"
#include "laneformer/scenes.hpp"
#include "laneformer/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace laneformer;
using nlohmann::json;

namespace {

#ifndef LANEFORMER_GIT_REV
#define LANEFORMER_GIT_REV "unknown"
#endif

constexpr const char* kVersion = "0.1.0";

std::string version_stamp() {
  return std::string("laneformer ") + kVersion + " (" + LANEFORMER_GIT_REV + ")";
}

// Removes everything this run created unless commit() is reached, so a
// failed subcommand never leaves partial outputs behind.
class ArtifactGuard {
 public:
  ~ArtifactGuard() {
    if (committed_) return;
    std::error_code ec;
    for (auto it = tracked_.rbegin(); it != tracked_.rend(); ++it) {
      fs::remove_all(*it, ec);
    }
  }
  ArtifactGuard() = default;
  ArtifactGuard(const ArtifactGuard&) = delete;
  ArtifactGuard& operator=(const ArtifactGuard&) = delete;

  void track(const fs::path& path) { tracked_.push_back(path); }

  /// Registers the output directory: if it does not exist yet it is created
  /// and tracked whole; otherwise individual artifacts must be track()ed.
  void claim_dir(const fs::path& dir) {
    if (!fs::exists(dir)) {
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " +
                      ec.message());
      }
      track(dir);
    } else if (!fs::is_directory(dir)) {
      throw IoError("output path " + dir.string() + " is not a directory");
    }
  }

  void commit() { committed_ = true; }

 private:
  std::vector<fs::path> tracked_;
  bool committed_ = false;
};

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed while writing " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_run_manifest(ArtifactGuard& guard, const fs::path& out_dir,
                        const std::string& subcommand, const json& config,
                        std::uint64_t seed,
                        const std::vector<std::string>& artifacts) {
  json manifest;
  manifest["subcommand"] = subcommand;
  manifest["version"] = version_stamp();
  manifest["seed"] = seed;
  manifest["config"] = config;
  manifest["artifacts"] = artifacts;
  fs::path path = out_dir / "run_manifest.json";
  guard.track(path);
  write_text_file(path, manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared option plumbing

struct ModelFlags {
  ModelConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d-prime", cfg.d_prime, "Shared attention width d'");
    cmd->add_option("--num-queries", cfg.num_queries, "Lane query count N");
    cmd->add_option("--num-boxes", cfg.num_boxes, "Detection slot count M");
    cmd->add_option("--encoder-layers", cfg.encoder_layers, "Encoder layers");
    cmd->add_option("--decoder-layers", cfg.decoder_layers, "Decoder layers");
    cmd->add_option("--heads", cfg.heads, "Attention heads");
    cmd->add_option("--roi-size", cfg.roi_size, "ROI-align output side");
    cmd->add_option("--feature-stage", cfg.feature_stage,
                    "Backbone stage the transformer reads");
    cmd->add_option("--ffn-hidden", cfg.ffn_hidden, "Feed-forward hidden width");
    cmd->add_option("--backbone-widths", cfg.backbone_widths,
                    "Backbone stage channel counts");
    cmd->add_option("--infer-threshold", cfg.score_threshold_infer,
                    "Keep lanes with p(lane) at or above this at inference");
    cmd->add_option("--detection-threshold", cfg.detection_score_threshold,
                    "Detector score cut for boxes entering the attention");
  }

  json snapshot() const {
    json j;
    j["d_prime"] = cfg.d_prime;
    j["num_queries"] = cfg.num_queries;
    j["num_boxes"] = cfg.num_boxes;
    j["encoder_layers"] = cfg.encoder_layers;
    j["decoder_layers"] = cfg.decoder_layers;
    j["heads"] = cfg.heads;
    j["roi_size"] = cfg.roi_size;
    j["feature_stage"] = cfg.feature_stage;
    j["ffn_hidden"] = cfg.ffn_hidden;
    j["backbone_widths"] = cfg.backbone_widths;
    j["image_width"] = cfg.image_width;
    j["image_height"] = cfg.image_height;
    j["infer_threshold"] = cfg.score_threshold_infer;
    j["detection_threshold"] = cfg.detection_score_threshold;
    return j;
  }
};

struct TrainFlags {
  TrainConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", cfg.epochs, "Training epochs");
    cmd->add_option("--batch-size", cfg.batch_size, "Frames per step");
    cmd->add_option("--lr-backbone", cfg.lr_backbone, "Backbone learning rate");
    cmd->add_option("--lr-transformer", cfg.lr_transformer,
                    "Transformer learning rate");
    cmd->add_option("--lr-drop-epoch", cfg.lr_drop_epoch,
                    "Epoch at which both rates drop");
    cmd->add_option("--lr-drop-factor", cfg.lr_drop_factor, "Drop multiplier");
    cmd->add_option("--clip-norm", cfg.clip_norm, "Global gradient-norm cap");
    cmd->add_option("--val-every", cfg.val_every, "Validate every k-th epoch");
    cmd->add_option("--early-stop-f1", cfg.early_stop_f1,
                    "Stop once validation F1 reaches this (negative disables)");
    cmd->add_flag("--row-column,!--no-row-column", cfg.row_column,
                  "Row/column attention branch");
    cmd->add_flag("--detection-attention,!--no-detection-attention",
                  cfg.detection_attention, "Detection attention branch");
    cmd->add_flag("--score-weighting,!--no-score-weighting",
                  cfg.use_score_weighting, "Score-weighted ROI pooling");
    cmd->add_flag("--category,!--no-category", cfg.use_category,
                  "Category one-hot in box embeddings");
  }

  json snapshot() const {
    json j;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["lr_backbone"] = cfg.lr_backbone;
    j["lr_transformer"] = cfg.lr_transformer;
    j["lr_drop_epoch"] = cfg.lr_drop_epoch;
    j["lr_drop_factor"] = cfg.lr_drop_factor;
    j["clip_norm"] = cfg.clip_norm;
    j["val_every"] = cfg.val_every;
    j["early_stop_f1"] = cfg.early_stop_f1;
    j["row_column"] = cfg.row_column;
    j["detection_attention"] = cfg.detection_attention;
    j["use_score_weighting"] = cfg.use_score_weighting;
    j["use_category"] = cfg.use_category;
    return j;
  }
};

void add_seed(CLI::App* cmd, std::uint64_t& seed) {
  cmd->add_option("--seed", seed, "Master seed; all randomness flows from it")
      ->envname("LANEFORMER_SEED");
}

// One subcommand parses per run, so a single holder serves them all.
std::string g_config_path;

void add_config_file(CLI::App* cmd) {
  cmd->add_option("--config", g_config_path,
                  "Config file (key=value, one per line, # comments); "
                  "explicit flags override it");
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

/// key=value lines, # comments, blank lines allowed; keys name long flags
/// without the leading dashes. Values already given on the command line win.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config " + path + ": expected key=value", line_no);
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ParseError("config " + path + ": empty key", line_no);
    }
    CLI::Option* op = cmd->get_option_no_throw("--" + key);
    if (op == nullptr || key == "config") {
      throw ParseError("config " + path + ": unknown key '" + key + "'",
                       line_no);
    }
    if (op->count() > 0) continue;  // explicit flag overrides the file
    std::istringstream tokens(value);  // vector options take space-separated
    std::string token;
    while (tokens >> token) op->add_result(token);
    if (value.empty()) op->add_result("");
    try {
      op->run_callback();
    } catch (const CLI::Error& e) {
      throw ParseError("config " + path + ": " + e.what(), line_no);
    }
  }
}

/// Post-merge presence check for options a config file may also supply.
void require_set(const CLI::App* cmd, const std::string& flag,
                 const std::string& value) {
  if (value.empty()) {
    throw Error(cmd->get_name() + ": " + flag +
                " is required (pass the flag or set it in --config)");
  }
}

// Fits the model geometry to the dataset the run reads.
void apply_dataset_geometry(ModelConfig& cfg, const DatasetManifest& manifest) {
  cfg.image_width = manifest.width;
  cfg.image_height = manifest.height;
}

std::vector<LoadedFrame> load_split_checked(const std::string& root,
                                            const std::string& split) {
  std::vector<LoadedFrame> frames = load_split(root, split);
  if (frames.empty()) {
    throw Error("dataset at " + root + " has no frames in split '" + split + "'");
  }
  return frames;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
  SceneSpec spec;
  Index n = 100;
  std::string out;
  std::string box_mode = "correlated";
  int jobs = 1;
};

int cmd_gen_data(GenDataOpts& opt) {
  opt.spec.box_mode = box_mode_from_token(opt.box_mode);
  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  for (const char* artifact : {"images", "gt", "detections.txt", "manifest.jsonl"}) {
    guard.track(fs::path(opt.out) / artifact);
  }
  DatasetManifest manifest = gen_dataset(opt.spec, opt.n, opt.out, opt.jobs);

  json config;
  config["n"] = opt.n;
  config["width"] = opt.spec.width;
  config["height"] = opt.spec.height;
  config["min_lanes"] = opt.spec.min_lanes;
  config["max_lanes"] = opt.spec.max_lanes;
  config["max_curvature"] = opt.spec.max_curvature;
  config["occlusion_prob"] = opt.spec.occlusion_prob;
  config["box_mode"] = opt.box_mode;
  config["crowded_prob"] = opt.spec.crowded_prob;
  config["night_prob"] = opt.spec.night_prob;
  config["jobs"] = opt.jobs;
  write_run_manifest(guard, opt.out, "gen-data", config, opt.spec.seed,
                     {"manifest.jsonl", "detections.txt", "images/", "gt/"});
  guard.commit();

  long long val = 0;
  for (const FrameRecord& f : manifest.frames) val += f.split == "val" ? 1 : 0;
  std::cout << "wrote " << manifest.frames.size() << " frames ("
            << manifest.frames.size() - val << " train, " << val << " val) to "
            << opt.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data;
  std::string out;
  ModelFlags model;
  TrainFlags trainer;
};

int cmd_train(TrainOpts& opt) {
  DatasetManifest dataset = load_manifest(opt.data);
  apply_dataset_geometry(opt.model.cfg, dataset);
  std::vector<LoadedFrame> train_frames = load_split_checked(opt.data, "train");
  std::vector<LoadedFrame> val_frames = load_split(opt.data, "val");

  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  fs::path metrics_path = fs::path(opt.out) / "metrics.jsonl";
  fs::path checkpoint_path = fs::path(opt.out) / "checkpoint.ckpt";
  guard.track(metrics_path);
  guard.track(checkpoint_path);
  opt.trainer.cfg.nan_snapshot_path =
      (fs::path(opt.out) / "train_nan_snapshot.ckpt").string();

  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  TrainResult result = [&] {
    try {
      return train(opt.model.cfg, opt.trainer.cfg, train_frames, val_frames,
                   &metrics);
    } catch (const TrainAbort&) {
      // Keep the diagnostic snapshot the abort message points at; drop the
      // partial metrics log.
      metrics.close();
      std::error_code ec;
      fs::remove(metrics_path, ec);
      guard.commit();
      throw;
    }
  }();
  metrics.close();
  result.model.save_checkpoint(checkpoint_path.string());

  json config;
  config["data"] = opt.data;
  config["model"] = opt.model.snapshot();
  config["model"]["image_width"] = dataset.width;
  config["model"]["image_height"] = dataset.height;
  config["train"] = opt.trainer.snapshot();
  write_run_manifest(guard, opt.out, "train", config, opt.trainer.cfg.seed,
                     {"checkpoint.ckpt", "metrics.jsonl"});
  guard.commit();

  const EpochLog& last = result.epochs.back();
  std::cout << "trained " << result.steps.size() << " steps over "
            << result.epochs.size() << " epochs; final mean loss "
            << last.mean_loss;
  if (last.has_val) std::cout << ", val F1 " << last.val.f1;
  if (result.early_stopped) std::cout << " (early stop)";
  std::cout << "\ncheckpoint: " << checkpoint_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string data;
  std::string split = "val";
  std::string checkpoint;
  std::string pred;
  std::string out;
  double iou_threshold = 0.5;
  int jobs = 1;
  std::uint64_t seed = 1;
};

EvalReport eval_predictions(const EvalOpts& opt,
                            const std::vector<LoadedFrame>& frames,
                            const DatasetManifest& dataset) {
  double width = static_cast<double>(dataset.width);
  double height = static_cast<double>(dataset.height);
  double line_width = std::max(1.0, scaled_line_width(height));

  std::vector<MatchCounts> per_frame(frames.size());
  auto eval_one = [&](std::size_t i) {
    fs::path path = fs::path(opt.pred) / (frames[i].frame_id + ".lines.txt");
    std::vector<Lane> preds =
        parse_culane_lines(read_text_file(path), width, height);
    per_frame[i] = match_frame(preds, frames[i].lanes, dataset.width,
                               dataset.height, line_width, opt.iou_threshold);
  };
  if (opt.jobs <= 1) {
    for (std::size_t i = 0; i < frames.size(); ++i) eval_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> failed{false};
    for (int t = 0; t < opt.jobs; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < frames.size();
             i = next.fetch_add(1)) {
          try {
            eval_one(i);
          } catch (...) {
            failed = true;
            return;
          }
        }
      });
    }
    for (std::thread& t : pool) t.join();
    if (failed) {
      // Re-run serially so the caller gets the real error message.
      for (std::size_t i = 0; i < frames.size(); ++i) eval_one(i);
    }
  }

  std::map<std::string, MatchCounts> by_tag;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    MatchCounts& bucket =
        by_tag[frames[i].tag.empty() ? "untagged" : frames[i].tag];
    bucket.tp += per_frame[i].tp;
    bucket.fp += per_frame[i].fp;
    bucket.fn += per_frame[i].fn;
  }
  std::map<std::string, EvalReport> reports;
  for (const auto& [tag, counts] : by_tag) {
    reports[tag] = make_report(counts.tp, counts.fp, counts.fn);
  }
  return aggregate(reports);
}

int cmd_eval(EvalOpts& opt) {
  DatasetManifest dataset = load_manifest(opt.data);
  std::vector<LoadedFrame> frames = load_split_checked(opt.data, opt.split);

  EvalReport report;
  if (!opt.checkpoint.empty()) {
    Model model = Model::load_checkpoint(opt.checkpoint);
    if (model.config().image_width != dataset.width ||
        model.config().image_height != dataset.height) {
      throw Error("checkpoint expects " +
                  std::to_string(model.config().image_width) + "x" +
                  std::to_string(model.config().image_height) +
                  " images but the dataset provides " +
                  std::to_string(dataset.width) + "x" +
                  std::to_string(dataset.height));
    }
    report = evaluate_frames(model, frames, opt.iou_threshold, opt.jobs);
  } else {
    report = eval_predictions(opt, frames, dataset);
  }

  std::cout << report_table(report);

  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  fs::path report_path = fs::path(opt.out) / "report.json";
  guard.track(report_path);
  write_text_file(report_path, report_json(report) + "\n");
  json config;
  config["data"] = opt.data;
  config["split"] = opt.split;
  config["checkpoint"] = opt.checkpoint;
  config["pred"] = opt.pred;
  config["iou_threshold"] = opt.iou_threshold;
  config["jobs"] = opt.jobs;
  write_run_manifest(guard, opt.out, "eval", config, opt.seed, {"report.json"});
  guard.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferOpts {
  std::string data;
  std::string split = "val";
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 1;
};

int cmd_infer(InferOpts& opt) {
  DatasetManifest dataset = load_manifest(opt.data);
  std::vector<LoadedFrame> frames = load_split_checked(opt.data, opt.split);
  Model model = Model::load_checkpoint(opt.checkpoint);
  if (model.config().image_width != dataset.width ||
      model.config().image_height != dataset.height) {
    throw Error("checkpoint geometry does not match the dataset");
  }

  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  double width = static_cast<double>(dataset.width);
  double height = static_cast<double>(dataset.height);
  long long total_lanes = 0;
  for (const LoadedFrame& frame : frames) {
    std::vector<Lane> lanes = model.infer(frame.image, frame.boxes);
    total_lanes += static_cast<long long>(lanes.size());
    fs::path path = fs::path(opt.out) / (frame.frame_id + ".lines.txt");
    guard.track(path);
    write_text_file(path, emit_culane_lines(lanes, width, height));
  }

  json config;
  config["data"] = opt.data;
  config["split"] = opt.split;
  config["checkpoint"] = opt.checkpoint;
  write_run_manifest(guard, opt.out, "infer", config, opt.seed,
                     {"<frame_id>.lines.txt"});
  guard.commit();
  std::cout << "wrote predictions for " << frames.size() << " frames ("
            << total_lanes << " lanes) to " << opt.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// dump-attention

struct DumpOpts {
  std::string data;
  std::string checkpoint;
  std::string frame_id;
  std::string out;
  std::uint64_t seed = 1;
};

std::string matrix_csv(const Tensor& m) {
  char buf[64];
  std::string text;
  for (Index r = 0; r < m.dim(0); ++r) {
    for (Index c = 0; c < m.dim(1); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(r * m.dim(1) + c));
      if (c) text += ',';
      text += buf;
    }
    text += '\n';
  }
  return text;
}

// Per-matrix min-max normalization to [0,255]; constant matrices render black.
Tensor heatmap_image(const Tensor& m) {
  double lo = m.at(0), hi = m.at(0);
  for (Index i = 1; i < m.size(); ++i) {
    lo = std::min(lo, m.at(i));
    hi = std::max(hi, m.at(i));
  }
  double span = hi - lo;
  std::vector<double> pixels(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) {
    pixels[static_cast<std::size_t>(i)] = span > 0.0 ? (m.at(i) - lo) / span : 0.0;
  }
  return Tensor::from_values({m.dim(0), m.dim(1), 1}, std::move(pixels));
}

int cmd_dump_attention(DumpOpts& opt) {
  DatasetManifest dataset = load_manifest(opt.data);
  std::vector<LoadedFrame> frames = load_split_checked(opt.data, "");
  const LoadedFrame* frame = nullptr;
  if (opt.frame_id.empty()) {
    frame = &frames.front();
  } else {
    for (const LoadedFrame& f : frames) {
      if (f.frame_id == opt.frame_id) frame = &f;
    }
    if (!frame) {
      throw Error("frame '" + opt.frame_id + "' is not in the dataset at " +
                  opt.data);
    }
  }

  Model model = Model::load_checkpoint(opt.checkpoint);
  if (model.config().image_width != dataset.width ||
      model.config().image_height != dataset.height) {
    throw Error("checkpoint geometry does not match the dataset");
  }
  std::vector<DetectionBox> boxes =
      select_and_pad(frame->boxes, model.config().num_boxes,
                     model.config().detection_score_threshold, opt.seed);
  Model::ForwardResult result = model.forward(frame->image, boxes);

  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  std::vector<std::string> artifacts;
  for (const auto& [key, matrix] : result.attention) {
    std::string stem = key;
    std::replace(stem.begin(), stem.end(), '.', '_');
    fs::path csv_path = fs::path(opt.out) / (stem + ".csv");
    fs::path pgm_path = fs::path(opt.out) / (stem + ".pgm");
    guard.track(csv_path);
    guard.track(pgm_path);
    write_text_file(csv_path, matrix_csv(matrix));
    write_pgm(pgm_path.string(), heatmap_image(matrix));
    artifacts.push_back(stem + ".csv");
    artifacts.push_back(stem + ".pgm");
    std::cout << key << ": " << matrix.dim(0) << "x" << matrix.dim(1) << "\n";
  }

  json config;
  config["data"] = opt.data;
  config["checkpoint"] = opt.checkpoint;
  config["frame"] = frame->frame_id;
  write_run_manifest(guard, opt.out, "dump-attention", config, opt.seed,
                     artifacts);
  guard.commit();
  std::cout << "dumped " << result.attention.size() << " attention matrices to "
            << opt.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOpts {
  ModelFlags model;
  std::uint64_t seed = 5;
  double tolerance = 1e-5;
  Index image_width = 16;
  Index image_height = 8;
};

int cmd_gradcheck(GradcheckOpts& opt) {
  // Small-by-default geometry: every block present, every weight perturbed.
  ModelConfig cfg = opt.model.cfg;
  cfg.image_width = opt.image_width;
  cfg.image_height = opt.image_height;
  cfg.validate();

  Rng rng(opt.seed);
  std::vector<double> pixels(
      static_cast<std::size_t>(cfg.image_height * cfg.image_width));
  for (double& v : pixels) v = rng.uniform();
  Tensor image = Tensor::from_values({cfg.image_height, cfg.image_width, 1},
                                     std::move(pixels));
  std::vector<DetectionBox> raw_boxes = {
      {0.1, 0.2, 0.6, 0.8, 0.9, Category::car},
      {0.4, 0.1, 0.9, 0.5, 0.7, Category::truck},
      {0.2, 0.5, 0.5, 0.9, 0.8, Category::bus},
  };
  std::vector<DetectionBox> boxes = select_and_pad(
      raw_boxes, cfg.num_boxes, cfg.detection_score_threshold, opt.seed);

  Model model(cfg, opt.seed);
  model.set_training(true);

  std::vector<GroundTruthSlot> gt;
  Lane lane;
  lane.s = 0.1;
  lane.e = 0.9;
  for (Index i = 0; i < kGridRows; ++i) {
    lane.xs[static_cast<std::size_t>(i)] =
        lane.row_valid(i) ? 0.35 + 0.3 * grid_y(i) : 0.0;
  }
  gt.push_back({1, lane});
  while (static_cast<Index>(gt.size()) < cfg.num_queries) gt.push_back({0, Lane{}});

  // Assignment frozen outside the tape so the objective stays smooth.
  std::vector<Index> sigma;
  {
    Model::ForwardResult probe = model.forward(image, boxes);
    sigma = hungarian(pairwise_cost(gt, probe.predictions, cfg.loss_weights)).sigma;
  }
  auto loss_fn = [&](const std::vector<Tensor>&) {
    Model::ForwardResult out = model.forward(image, boxes);
    return total_loss(gt, out.predictions, sigma, cfg.loss_weights);
  };

  // One group per architectural block; parameter tensors are live handles,
  // so perturbing them inside grad_check drives the real model.
  std::vector<std::pair<std::string, std::string>> groups = {
      {"backbone", "backbone."},   {"encoder", "encoder."},
      {"detection", "detection."}, {"decoder", "decoder."},
      {"heads", "head."},
  };
  double overall = 0.0;
  bool ok = true;
  for (const auto& [label, prefix] : groups) {
    std::vector<Tensor> inputs;
    for (const std::string& name : model.parameter_names()) {
      if (name.rfind(prefix, 0) == 0) inputs.push_back(model.param(name));
    }
    if (inputs.empty()) {
      std::printf("%-10s (no parameters; block disabled)\n", label.c_str());
      continue;
    }
    GradCheckResult result = grad_check(loss_fn, inputs);
    bool pass = result.max_rel_error < opt.tolerance;
    ok = ok && pass;
    overall = std::max(overall, result.max_rel_error);
    std::printf("%-10s max rel error %.3e  %s\n", label.c_str(),
                result.max_rel_error, pass ? "ok" : "FAIL");
  }
  std::printf("max relative error %.3e (tolerance %.1e): %s\n", overall,
              opt.tolerance, ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOpts {
  std::string data;
  std::string out;
  ModelFlags model;
  TrainFlags trainer;
};

int cmd_ablate(AblateOpts& opt) {
  DatasetManifest dataset = load_manifest(opt.data);
  apply_dataset_geometry(opt.model.cfg, dataset);
  std::vector<LoadedFrame> train_frames = load_split_checked(opt.data, "train");
  std::vector<LoadedFrame> val_frames = load_split_checked(opt.data, "val");

  ArtifactGuard guard;
  guard.claim_dir(opt.out);
  fs::path metrics_path = fs::path(opt.out) / "metrics.jsonl";
  fs::path table_path = fs::path(opt.out) / "ablation.json";
  guard.track(metrics_path);
  guard.track(table_path);
  opt.trainer.cfg.nan_snapshot_path =
      (fs::path(opt.out) / "train_nan_snapshot.ckpt").string();

  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());
  std::vector<AblationRow> rows = [&] {
    try {
      return ablation_suite(opt.model.cfg, opt.trainer.cfg, train_frames,
                            val_frames, &metrics);
    } catch (const TrainAbort&) {
      metrics.close();
      std::error_code ec;
      fs::remove(metrics_path, ec);
      guard.commit();
      throw;
    }
  }();
  metrics.close();

  json table = json::array();
  for (const AblationRow& row : rows) {
    json r;
    r["name"] = row.name;
    r["row_column"] = row.row_column;
    r["detection_attention"] = row.detection_attention;
    r["use_score_weighting"] = row.use_score_weighting;
    r["use_category"] = row.use_category;
    r["f1"] = row.report.f1;
    r["precision"] = row.report.precision;
    r["recall"] = row.report.recall;
    table.push_back(std::move(r));
  }
  write_text_file(table_path, table.dump(2) + "\n");

  json config;
  config["data"] = opt.data;
  config["model"] = opt.model.snapshot();
  config["train"] = opt.trainer.snapshot();
  write_run_manifest(guard, opt.out, "ablate", config, opt.trainer.cfg.seed,
                     {"ablation.json", "metrics.jsonl"});
  guard.commit();

  std::cout << ablation_table(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lane detection with row/column and detection attention"};
  app.set_version_flag("--version", version_stamp());
  app.require_subcommand(1);

  GenDataOpts gen_opts;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_config_file(gen);
  gen->add_option("--n", gen_opts.n, "Number of frames");
  gen->add_option("--out", gen_opts.out, "Dataset directory");
  add_seed(gen, gen_opts.spec.seed);
  gen->add_option("--width", gen_opts.spec.width, "Image width in pixels");
  gen->add_option("--height", gen_opts.spec.height, "Image height in pixels");
  gen->add_option("--min-lanes", gen_opts.spec.min_lanes, "Minimum lanes per frame");
  gen->add_option("--max-lanes", gen_opts.spec.max_lanes, "Maximum lanes per frame");
  gen->add_option("--max-curvature", gen_opts.spec.max_curvature,
                  "Curvature bound (normalized units)");
  gen->add_option("--occlusion-prob", gen_opts.spec.occlusion_prob,
                  "Per-lane occluder probability");
  gen->add_option("--box-mode", gen_opts.box_mode,
                  "Detection placement: correlated | random | none");
  gen->add_option("--crowded-prob", gen_opts.spec.crowded_prob,
                  "Crowded-scene probability");
  gen->add_option("--night-prob", gen_opts.spec.night_prob,
                  "Night-scene probability");
  gen->add_option("--jobs", gen_opts.jobs, "Worker threads");

  TrainOpts train_opts;
  CLI::App* tr = app.add_subcommand("train", "Train a model on a dataset");
  add_config_file(tr);
  tr->add_option("--data", train_opts.data, "Dataset directory");
  tr->add_option("--out", train_opts.out, "Run output directory");
  add_seed(tr, train_opts.trainer.cfg.seed);
  train_opts.model.attach(tr);
  train_opts.trainer.attach(tr);

  EvalOpts eval_opts;
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint or stored predictions");
  add_config_file(ev);
  ev->add_option("--data", eval_opts.data, "Dataset directory");
  ev->add_option("--out", eval_opts.out, "Report output directory");
  ev->add_option("--split", eval_opts.split, "Dataset split ('' = all)");
  CLI::Option* ckpt_opt =
      ev->add_option("--checkpoint", eval_opts.checkpoint, "Model checkpoint");
  CLI::Option* pred_opt = ev->add_option(
      "--pred", eval_opts.pred, "Directory of <frame_id>.lines.txt predictions");
  ckpt_opt->excludes(pred_opt);
  ev->add_option("--iou-threshold", eval_opts.iou_threshold,
                 "IoU at or above which a prediction is a true positive");
  ev->add_option("--jobs", eval_opts.jobs, "Worker threads");
  add_seed(ev, eval_opts.seed);

  InferOpts infer_opts;
  CLI::App* in = app.add_subcommand("infer", "Write CULane-format predictions");
  add_config_file(in);
  in->add_option("--data", infer_opts.data, "Dataset directory");
  in->add_option("--checkpoint", infer_opts.checkpoint, "Model checkpoint");
  in->add_option("--out", infer_opts.out, "Prediction output directory");
  in->add_option("--split", infer_opts.split, "Dataset split ('' = all)");
  add_seed(in, infer_opts.seed);

  DumpOpts dump_opts;
  CLI::App* dump =
      app.add_subcommand("dump-attention", "Dump attention matrices as CSV + PGM");
  add_config_file(dump);
  dump->add_option("--data", dump_opts.data, "Dataset directory");
  dump->add_option("--checkpoint", dump_opts.checkpoint, "Model checkpoint");
  dump->add_option("--out", dump_opts.out, "Dump output directory");
  dump->add_option("--frame", dump_opts.frame_id,
                   "Frame id (default: first frame)");
  add_seed(dump, dump_opts.seed);

  GradcheckOpts grad_opts;
  // Toy geometry by default: gradcheck perturbs every parameter twice.
  grad_opts.model.cfg.d_prime = 8;
  grad_opts.model.cfg.num_queries = 3;
  grad_opts.model.cfg.num_boxes = 2;
  grad_opts.model.cfg.heads = 2;
  grad_opts.model.cfg.ffn_hidden = 16;
  grad_opts.model.cfg.backbone_widths = {2, 3, 4};
  CLI::App* grad = app.add_subcommand(
      "gradcheck", "Finite-difference check of every differentiable block");
  add_config_file(grad);
  grad_opts.model.attach(grad);
  grad->add_option("--image-width", grad_opts.image_width, "Probe image width");
  grad->add_option("--image-height", grad_opts.image_height, "Probe image height");
  grad->add_option("--tolerance", grad_opts.tolerance, "Max relative error");
  add_seed(grad, grad_opts.seed);

  AblateOpts ablate_opts;
  CLI::App* ab = app.add_subcommand("ablate", "Train the component-switch lattice");
  add_config_file(ab);
  ab->add_option("--data", ablate_opts.data, "Dataset directory");
  ab->add_option("--out", ablate_opts.out, "Run output directory");
  add_seed(ab, ablate_opts.trainer.cfg.seed);
  ablate_opts.model.attach(ab);
  ablate_opts.trainer.attach(ab);

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* parsed = app.get_subcommands().front();
    if (!g_config_path.empty()) apply_config_file(parsed, g_config_path);

    if (gen->parsed()) {
      require_set(gen, "--out", gen_opts.out);
      return cmd_gen_data(gen_opts);
    }
    if (tr->parsed()) {
      require_set(tr, "--data", train_opts.data);
      require_set(tr, "--out", train_opts.out);
      return cmd_train(train_opts);
    }
    if (ev->parsed()) {
      require_set(ev, "--data", eval_opts.data);
      require_set(ev, "--out", eval_opts.out);
      if (eval_opts.checkpoint.empty() == eval_opts.pred.empty()) {
        throw Error("eval needs exactly one of --checkpoint or --pred");
      }
      return cmd_eval(eval_opts);
    }
    if (in->parsed()) {
      require_set(in, "--data", infer_opts.data);
      require_set(in, "--checkpoint", infer_opts.checkpoint);
      require_set(in, "--out", infer_opts.out);
      return cmd_infer(infer_opts);
    }
    if (dump->parsed()) {
      require_set(dump, "--data", dump_opts.data);
      require_set(dump, "--checkpoint", dump_opts.checkpoint);
      require_set(dump, "--out", dump_opts.out);
      return cmd_dump_attention(dump_opts);
    }
    if (grad->parsed()) return cmd_gradcheck(grad_opts);
    if (ab->parsed()) {
      require_set(ab, "--data", ablate_opts.data);
      require_set(ab, "--out", ablate_opts.out);
      return cmd_ablate(ablate_opts);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
