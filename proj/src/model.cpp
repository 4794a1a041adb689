#include "laneformer/model.hpp"

#include "laneformer/ops.hpp"
#include "laneformer/rng.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace laneformer {

namespace {

Tensor xavier(Rng& rng, Shape shape, Index fan_in, Index fan_out) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> values(static_cast<std::size_t>(shape_size(shape)));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from_values(std::move(shape), std::move(values));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v <= 0) throw Error(std::string("ModelConfig: ") + name + " must be positive");
  };
  positive(d_prime, "d_prime");
  positive(num_queries, "num_queries");
  positive(num_boxes, "num_boxes");
  positive(encoder_layers, "encoder_layers");
  positive(decoder_layers, "decoder_layers");
  positive(heads, "heads");
  positive(roi_size, "roi_size");
  positive(ffn_hidden, "ffn_hidden");
  positive(image_height, "image_height");
  positive(image_width, "image_width");
  if (d_prime % 4 != 0) {
    throw Error("ModelConfig: d_prime must be a multiple of 4 (2-D position codes)");
  }
  if (d_prime % heads != 0) {
    throw Error("ModelConfig: heads must divide d_prime");
  }
  if (backbone_widths.empty()) {
    throw Error("ModelConfig: backbone_widths must name at least one stage");
  }
  for (Index w : backbone_widths) positive(w, "backbone width");
  if (feature_stage < 0 ||
      feature_stage >= static_cast<Index>(backbone_widths.size())) {
    throw Error("ModelConfig: feature_stage " + std::to_string(feature_stage) +
                " out of range for " + std::to_string(backbone_widths.size()) +
                " stages");
  }
  Index stride = total_stride();
  if (image_height % stride != 0 || image_width % stride != 0) {
    throw Error("ModelConfig: image " + std::to_string(image_width) + "x" +
                std::to_string(image_height) +
                " not divisible by total backbone stride " +
                std::to_string(stride));
  }
  if (score_threshold_infer < 0 || score_threshold_infer > 1 ||
      detection_score_threshold < 0 || detection_score_threshold > 1) {
    throw Error("ModelConfig: thresholds must lie in [0,1]");
  }
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  register_params(seed);
}

Tensor Model::p(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("Model: unknown parameter '" + name + "'");
  return it->second;
}

Tensor Model::param(const std::string& name) const { return p(name); }

Index Model::parameter_count() const {
  Index total = 0;
  for (const auto& [name, t] : params_) total += t.size();
  return total;
}

void Model::set_training(bool on) {
  for (auto& [name, t] : params_) t.set_requires_grad(on);
}

MhaWeights Model::mha(const std::string& prefix) const {
  return MhaWeights{p(prefix + ".wq"), p(prefix + ".bq"), p(prefix + ".wk"),
                    p(prefix + ".bk"), p(prefix + ".wv"), p(prefix + ".bv"),
                    p(prefix + ".wo"), p(prefix + ".bo")};
}

Tensor Model::ffn(const Tensor& x, const std::string& prefix) const {
  Tensor hidden = relu(linear(x, p(prefix + ".w1"), p(prefix + ".b1")));
  return linear(hidden, p(prefix + ".w2"), p(prefix + ".b2"));
}

void Model::register_params(std::uint64_t seed) {
  Rng rng(seed);
  auto add = [&](const std::string& name, Tensor t) {
    order_.push_back(name);
    params_.emplace(name, std::move(t));
  };
  auto add_linear = [&](const std::string& prefix, Index in, Index out) {
    add(prefix + ".weight", xavier(rng, {in, out}, in, out));
    add(prefix + ".bias", Tensor::zeros({out}));
  };
  auto add_mha = [&](const std::string& prefix) {
    const Index d = config_.d_prime;
    for (const char* name : {"wq", "wk", "wv", "wo"}) {
      add(prefix + "." + name, xavier(rng, {d, d}, d, d));
    }
    for (const char* name : {"bq", "bk", "bv", "bo"}) {
      add(prefix + "." + name, Tensor::zeros({d}));
    }
  };
  auto add_norm = [&](const std::string& prefix) {
    add(prefix + ".gamma", Tensor::constant({config_.d_prime}, 1.0));
    add(prefix + ".beta", Tensor::zeros({config_.d_prime}));
  };
  auto add_ffn = [&](const std::string& prefix) {
    add(prefix + ".w1",
        xavier(rng, {config_.d_prime, config_.ffn_hidden}, config_.d_prime,
               config_.ffn_hidden));
    add(prefix + ".b1", Tensor::zeros({config_.ffn_hidden}));
    add(prefix + ".w2",
        xavier(rng, {config_.ffn_hidden, config_.d_prime}, config_.ffn_hidden,
               config_.d_prime));
    add(prefix + ".b2", Tensor::zeros({config_.d_prime}));
  };

  // Backbone: one stride-2 3x3 conv per stage.
  Index cin = 1;
  for (std::size_t s = 0; s < config_.backbone_widths.size(); ++s) {
    Index cout = config_.backbone_widths[s];
    std::string prefix = "backbone.stage" + std::to_string(s);
    add(prefix + ".weight",
        xavier(rng, {3, 3, cin, cout}, 9 * cin, 9 * cout));
    add(prefix + ".bias", Tensor::zeros({cout}));
    cin = cout;
  }

  const Index d = config_.d_prime;
  const Index hs = config_.image_height / config_.stage_stride();
  const Index ws = config_.image_width / config_.stage_stride();
  const Index ds = config_.backbone_widths[static_cast<std::size_t>(config_.feature_stage)];

  add_linear("encoder.input_proj", ds, d);
  for (Index l = 0; l < config_.encoder_layers; ++l) {
    std::string prefix = "encoder.layer" + std::to_string(l);
    add_mha(prefix + ".self");
    if (config_.use_row_column) {
      add_linear(prefix + ".row", ws * ds, d);
      add_linear(prefix + ".col", hs * ds, d);
    }
    add_ffn(prefix + ".ffn");
    add_norm(prefix + ".norm1");
    add_norm(prefix + ".norm2");
  }

  if (config_.use_detection_attention) {
    add_linear("detection.bbox", kBoxEncodingDim, d);
    add_linear("detection.roi", config_.roi_size * config_.roi_size * ds, d);
  }

  {
    std::vector<double> q(static_cast<std::size_t>(config_.num_queries * d));
    for (double& v : q) v = rng.normal(0.0, 0.5);
    add("decoder.queries", Tensor::from_values({config_.num_queries, d}, std::move(q)));
  }
  for (Index l = 0; l < config_.decoder_layers; ++l) {
    std::string prefix = "decoder.layer" + std::to_string(l);
    add_mha(prefix + ".self");
    add_mha(prefix + ".cross");
    add_ffn(prefix + ".ffn");
    add_norm(prefix + ".norm1");
    add_norm(prefix + ".norm2");
    add_norm(prefix + ".norm3");
  }

  add_linear("head.cls", d, 2);
  add("head.reg.w1", xavier(rng, {d, d}, d, d));
  add("head.reg.b1", Tensor::zeros({d}));
  add("head.reg.w2", xavier(rng, {d, d}, d, d));
  add("head.reg.b2", Tensor::zeros({d}));
  add("head.reg.w3", xavier(rng, {d, kGridRows + 2}, d, kGridRows + 2));
  add("head.reg.b3", Tensor::zeros({kGridRows + 2}));
}

BackboneOut Model::backbone_forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw Error("backbone_forward: expected a (height, width, 1) image, got " +
                shape_to_string(image.shape()));
  }
  if (image.dim(0) != config_.image_height || image.dim(1) != config_.image_width) {
    throw Error("backbone_forward: image " + std::to_string(image.dim(1)) + "x" +
                std::to_string(image.dim(0)) + " does not match the configured " +
                std::to_string(config_.image_width) + "x" +
                std::to_string(config_.image_height) +
                " (total backbone stride " + std::to_string(config_.total_stride()) + ")");
  }

  BackboneOut out;
  Tensor x = image;
  for (std::size_t s = 0; s < config_.backbone_widths.size(); ++s) {
    std::string prefix = "backbone.stage" + std::to_string(s);
    x = relu(conv2d(x, p(prefix + ".weight"), p(prefix + ".bias"), 2, 1));
    out.stages.push_back(x);
  }
  out.h_f = out.stages[static_cast<std::size_t>(config_.feature_stage)];
  out.h = out.h_f.dim(0);
  out.w = out.h_f.dim(1);
  out.d = out.h_f.dim(2);
  out.h_r = reshape(out.h_f, {out.h, out.w * out.d});
  out.h_c = reshape(permute_hw(out.h_f), {out.w, out.h * out.d});
  return out;
}

RoiEmbeddingResult Model::detection_embeddings(const BackboneOut& features,
                                               const std::vector<DetectionBox>& boxes,
                                               double image_w, double image_h,
                                               Tensor& z_b_out) const {
  if (!config_.use_detection_attention) {
    throw Error("detection_embeddings: detection attention is disabled");
  }
  if (static_cast<Index>(boxes.size()) != config_.num_boxes) {
    throw Error("detection_embeddings: expected exactly " +
                std::to_string(config_.num_boxes) + " boxes, got " +
                std::to_string(boxes.size()) + " (run select_and_pad first)");
  }
  z_b_out = bbox_embeddings(boxes, p("detection.bbox.weight"),
                            p("detection.bbox.bias"), config_.use_category);
  double scale = 1.0 / static_cast<double>(config_.stage_stride());
  return roi_embeddings(features.h_f, boxes, image_w, image_h, scale,
                        config_.roi_size, p("detection.roi.weight"),
                        p("detection.roi.bias"), config_.use_score_weighting);
}

Tensor Model::encoder_forward(const BackboneOut& features, const Tensor& z_b,
                              const Tensor& z_r,
                              std::map<std::string, Tensor>* attention) const {
  const Index h = features.h, w = features.w, d = config_.d_prime;
  if (config_.use_detection_attention && (!z_b.defined() || !z_r.defined())) {
    throw Error("encoder_forward: detection attention enabled but Z_b/Z_r missing");
  }

  Tensor pos = grid_position_embeddings(h, w, d);
  std::vector<Index> row_of(static_cast<std::size_t>(h * w));
  std::vector<Index> col_of(static_cast<std::size_t>(h * w));
  for (Index i = 0; i < h * w; ++i) {
    row_of[static_cast<std::size_t>(i)] = i / w;
    col_of[static_cast<std::size_t>(i)] = i % w;
  }

  Tensor tokens = reshape(features.h_f, {h * w, features.d});
  Tensor x = linear(tokens, p("encoder.input_proj.weight"),
                    p("encoder.input_proj.bias"));
  for (Index l = 0; l < config_.encoder_layers; ++l) {
    std::string prefix = "encoder.layer" + std::to_string(l);
    Tensor qk = add(x, pos);
    AttentionOutput self =
        multi_head_attention(qk, qk, x, mha(prefix + ".self"), config_.heads);
    if (attention) (*attention)[prefix + ".self"] = self.weights;
    Tensor fused = add(x, self.values);

    if (config_.use_detection_attention) {
      AttentionOutput p2b = pixel_to_bbox(x, z_b, z_r);
      if (attention) (*attention)[prefix + ".p2b"] = p2b.weights;
      fused = add(fused, p2b.values);
    }
    if (config_.use_row_column) {
      AttentionOutput row = row_attention(features.h_r, p(prefix + ".row.weight"),
                                          p(prefix + ".row.bias"));
      AttentionOutput col = column_attention(features.h_c, p(prefix + ".col.weight"),
                                             p(prefix + ".col.bias"));
      if (attention) {
        (*attention)[prefix + ".row"] = row.weights;
        (*attention)[prefix + ".col"] = col.weights;
      }
      fused = add(fused, gather_rows(row.values, row_of));
      fused = add(fused, gather_rows(col.values, col_of));
    }

    x = layer_norm(fused, p(prefix + ".norm1.gamma"), p(prefix + ".norm1.beta"));
    x = layer_norm(add(x, ffn(x, prefix + ".ffn")), p(prefix + ".norm2.gamma"),
                   p(prefix + ".norm2.beta"));
  }
  return x;
}

Tensor Model::decoder_forward(const Tensor& memory, Index h, Index w,
                              const Tensor& z_b, const Tensor& z_r,
                              std::map<std::string, Tensor>* attention) const {
  if (memory.rank() != 2 || memory.dim(0) != h * w ||
      memory.dim(1) != config_.d_prime) {
    throw Error("decoder_forward: memory " + shape_to_string(memory.shape()) +
                " does not match " + std::to_string(h * w) + "x" +
                std::to_string(config_.d_prime));
  }
  if (config_.use_detection_attention && (!z_b.defined() || !z_r.defined())) {
    throw Error("decoder_forward: detection attention enabled but Z_b/Z_r missing");
  }
  Tensor mem_pos = grid_position_embeddings(h, w, config_.d_prime);
  Tensor mem_keys = add(memory, mem_pos);

  Tensor y = p("decoder.queries");
  for (Index l = 0; l < config_.decoder_layers; ++l) {
    std::string prefix = "decoder.layer" + std::to_string(l);
    AttentionOutput self =
        multi_head_attention(y, y, y, mha(prefix + ".self"), config_.heads);
    if (attention) (*attention)[prefix + ".self"] = self.weights;
    y = layer_norm(add(y, self.values), p(prefix + ".norm1.gamma"),
                   p(prefix + ".norm1.beta"));

    AttentionOutput cross = multi_head_attention(y, mem_keys, memory,
                                                 mha(prefix + ".cross"),
                                                 config_.heads);
    if (attention) (*attention)[prefix + ".cross"] = cross.weights;
    Tensor fused = add(y, cross.values);
    if (config_.use_detection_attention) {
      AttentionOutput q2b = query_to_bbox(y, z_b, z_r);
      if (attention) (*attention)[prefix + ".q2b"] = q2b.weights;
      fused = add(fused, q2b.values);
    }
    y = layer_norm(fused, p(prefix + ".norm2.gamma"), p(prefix + ".norm2.beta"));
    y = layer_norm(add(y, ffn(y, prefix + ".ffn")), p(prefix + ".norm3.gamma"),
                   p(prefix + ".norm3.beta"));
  }
  return y;
}

std::vector<LanePrediction> Model::predict_heads(const Tensor& query_features) const {
  if (query_features.rank() != 2 || query_features.dim(1) != config_.d_prime) {
    throw Error("predict_heads: expected Nx" + std::to_string(config_.d_prime) +
                " features, got " + shape_to_string(query_features.shape()));
  }
  Tensor probs = softmax(linear(query_features, p("head.cls.weight"),
                                p("head.cls.bias")),
                         1);
  Tensor h1 = relu(linear(query_features, p("head.reg.w1"), p("head.reg.b1")));
  Tensor h2 = relu(linear(h1, p("head.reg.w2"), p("head.reg.b2")));
  Tensor reg = sigmoid(linear(h2, p("head.reg.w3"), p("head.reg.b3")));

  std::vector<LanePrediction> predictions;
  const Index n = query_features.dim(0);
  predictions.reserve(static_cast<std::size_t>(n));
  for (Index q = 0; q < n; ++q) {
    LanePrediction pred;
    pred.class_probs = reshape(gather_rows(probs, {q}), {2});
    Tensor row = gather_rows(reg, {q});
    pred.xs = reshape(slice_cols(row, 0, kGridRows), {kGridRows});
    pred.s = reshape(slice_cols(row, kGridRows, 1), {1});
    pred.e = reshape(slice_cols(row, kGridRows + 1, 1), {1});
    predictions.push_back(std::move(pred));
  }
  return predictions;
}

Model::ForwardResult Model::forward(const Tensor& image,
                                    const std::vector<DetectionBox>& boxes) const {
  ForwardResult result;
  BackboneOut features = backbone_forward(image);
  Tensor z_b, z_r;
  if (config_.use_detection_attention) {
    RoiEmbeddingResult roi = detection_embeddings(
        features, boxes, static_cast<double>(config_.image_width),
        static_cast<double>(config_.image_height), z_b);
    z_r = roi.z_r;
    result.degenerate_boxes = roi.degenerate_boxes;
  }
  result.memory = encoder_forward(features, z_b, z_r, &result.attention);
  result.query_features = decoder_forward(result.memory, features.h, features.w,
                                          z_b, z_r, &result.attention);
  result.predictions = predict_heads(result.query_features);
  return result;
}

std::vector<Lane> Model::infer(const Tensor& image,
                               const std::vector<DetectionBox>& detections) const {
  std::vector<DetectionBox> boxes =
      select_and_pad(detections, config_.num_boxes,
                     config_.detection_score_threshold, kInferencePadSeed);
  ForwardResult out = forward(image, boxes);
  std::vector<Lane> lanes;
  for (const LanePrediction& pred : out.predictions) {
    if (pred.class_probs.at(1) < config_.score_threshold_infer) continue;
    double s = pred.s.at(0), e = pred.e.at(0);
    if (e < s) continue;  // unordered span: an empty lane
    Lane lane;
    lane.s = s;
    lane.e = e;
    for (Index row = 0; row < kGridRows; ++row) {
      lane.xs[static_cast<std::size_t>(row)] =
          lane.row_valid(row) ? pred.xs.at(row) : 0.0;
    }
    if (lane.valid_rows() == 0) continue;
    lanes.push_back(lane);
  }
  return lanes;
}

void Model::save_checkpoint(const std::string& path) const {
  std::ostringstream out;
  out << "laneformer-checkpoint v1\n";
  const ModelConfig& c = config_;
  out << "config d_prime " << c.d_prime << "\n";
  out << "config num_queries " << c.num_queries << "\n";
  out << "config num_boxes " << c.num_boxes << "\n";
  out << "config encoder_layers " << c.encoder_layers << "\n";
  out << "config decoder_layers " << c.decoder_layers << "\n";
  out << "config heads " << c.heads << "\n";
  out << "config roi_size " << c.roi_size << "\n";
  out << "config feature_stage " << c.feature_stage << "\n";
  out << "config ffn_hidden " << c.ffn_hidden << "\n";
  out << "config image_height " << c.image_height << "\n";
  out << "config image_width " << c.image_width << "\n";
  out << "config backbone_widths";
  for (Index w : c.backbone_widths) out << " " << w;
  out << "\n";
  out << "config score_threshold_infer " << fmt_double(c.score_threshold_infer) << "\n";
  out << "config detection_score_threshold "
      << fmt_double(c.detection_score_threshold) << "\n";
  out << "config loss_weights " << fmt_double(c.loss_weights.w1) << " "
      << fmt_double(c.loss_weights.w2) << " " << fmt_double(c.loss_weights.w3)
      << " " << fmt_double(c.loss_weights.w4) << "\n";
  out << "config use_detection_attention " << (c.use_detection_attention ? 1 : 0) << "\n";
  out << "config use_row_column " << (c.use_row_column ? 1 : 0) << "\n";
  out << "config use_category " << (c.use_category ? 1 : 0) << "\n";
  out << "config use_score_weighting " << (c.use_score_weighting ? 1 : 0) << "\n";

  for (const std::string& name : order_) {
    const Tensor& t = params_.at(name);
    out << "tensor " << name << " " << t.rank();
    for (Index dim : t.shape()) out << " " << dim;
    out << "\n";
    auto values = t.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out << " ";
      out << fmt_double(values[i]);
    }
    out << "\n";
  }
  out << "end\n";

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint for writing: " + path);
  file << out.str();
  if (!file.good()) throw IoError("failed writing checkpoint: " + path);
}

Model Model::load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint: " + path);
  std::string header;
  std::getline(file, header);
  if (header != "laneformer-checkpoint v1") {
    throw ParseError("unrecognized checkpoint header: '" + header + "'");
  }

  ModelConfig cfg;
  cfg.backbone_widths.clear();
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
  std::string line;
  bool saw_end = false;
  while (std::getline(file, line)) {
    if (line == "end") {
      saw_end = true;
      break;
    }
    std::istringstream in(line);
    std::string kind, key;
    in >> kind >> key;
    if (kind == "config") {
      if (key == "d_prime") in >> cfg.d_prime;
      else if (key == "num_queries") in >> cfg.num_queries;
      else if (key == "num_boxes") in >> cfg.num_boxes;
      else if (key == "encoder_layers") in >> cfg.encoder_layers;
      else if (key == "decoder_layers") in >> cfg.decoder_layers;
      else if (key == "heads") in >> cfg.heads;
      else if (key == "roi_size") in >> cfg.roi_size;
      else if (key == "feature_stage") in >> cfg.feature_stage;
      else if (key == "ffn_hidden") in >> cfg.ffn_hidden;
      else if (key == "image_height") in >> cfg.image_height;
      else if (key == "image_width") in >> cfg.image_width;
      else if (key == "backbone_widths") {
        Index w;
        while (in >> w) cfg.backbone_widths.push_back(w);
      } else if (key == "score_threshold_infer") in >> cfg.score_threshold_infer;
      else if (key == "detection_score_threshold") in >> cfg.detection_score_threshold;
      else if (key == "loss_weights") {
        in >> cfg.loss_weights.w1 >> cfg.loss_weights.w2 >> cfg.loss_weights.w3 >>
            cfg.loss_weights.w4;
      } else if (key == "use_detection_attention") {
        int v; in >> v; cfg.use_detection_attention = v != 0;
      } else if (key == "use_row_column") {
        int v; in >> v; cfg.use_row_column = v != 0;
      } else if (key == "use_category") {
        int v; in >> v; cfg.use_category = v != 0;
      } else if (key == "use_score_weighting") {
        int v; in >> v; cfg.use_score_weighting = v != 0;
      } else {
        throw ParseError("unknown checkpoint config key: '" + key + "'");
      }
      if (in.fail() && key != "backbone_widths") {
        throw ParseError("malformed checkpoint config line: '" + line + "'");
      }
    } else if (kind == "tensor") {
      int rank = 0;
      in >> rank;
      if (in.fail() || rank < 0 || rank > 8) {
        throw ParseError("malformed tensor line: '" + line + "'");
      }
      Shape shape(static_cast<std::size_t>(rank));
      for (Index& dim : shape) {
        in >> dim;
        if (in.fail() || dim <= 0) {
          throw ParseError("malformed tensor shape in: '" + line + "'");
        }
      }
      Index count = shape_size(shape);
      std::vector<double> values(static_cast<std::size_t>(count));
      std::string value_line;
      if (!std::getline(file, value_line)) {
        throw ParseError("checkpoint truncated inside tensor '" + key + "'");
      }
      std::istringstream vin(value_line);
      for (double& v : values) {
        vin >> v;
        if (vin.fail()) {
          throw ParseError("tensor '" + key + "' holds fewer than " +
                           std::to_string(count) + " values");
        }
      }
      double extra;
      if (vin >> extra) {
        throw ParseError("tensor '" + key + "' holds more than " +
                         std::to_string(count) + " values");
      }
      if (!tensors.emplace(key, std::make_pair(std::move(shape), std::move(values))).second) {
        throw ParseError("duplicate tensor '" + key + "' in checkpoint");
      }
    } else if (!kind.empty()) {
      throw ParseError("unrecognized checkpoint line: '" + line + "'");
    }
  }
  if (!saw_end) throw ParseError("checkpoint missing 'end' terminator: " + path);

  Model model(cfg, /*seed=*/0);
  for (const std::string& name : model.order_) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw ParseError("checkpoint is missing parameter '" + name + "'");
    }
    Tensor& target = model.params_.at(name);
    if (it->second.first != target.shape()) {
      throw ParseError("checkpoint parameter '" + name + "' has shape " +
                       shape_to_string(it->second.first) + ", expected " +
                       shape_to_string(target.shape()));
    }
    auto dst = target.values_mut();
    const auto& src = it->second.second;
    std::copy(src.begin(), src.end(), dst.begin());
    tensors.erase(it);
  }
  if (!tensors.empty()) {
    throw ParseError("checkpoint holds unknown parameter '" +
                     tensors.begin()->first + "'");
  }
  return model;
}

}  // namespace laneformer
