#include "laneformer/scenes.hpp"

#include "laneformer/error.hpp"
#include "laneformer/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>
#include <sstream>

namespace laneformer {

namespace {

// Rendering palette per scene tag.
struct Palette {
  double base, gradient, paint, vehicle, person, occluder;
};

Palette palette_for(const std::string& tag) {
  if (tag == "night") return {0.10, 0.03, 0.50, 0.22, 0.35, 0.12};
  return {0.30, 0.06, 0.92, 0.55, 0.75, 0.33};
}

// The underlying quadratic a lane is sampled from; kept around for
// rendering and for box-placement distances.
struct LaneCurve {
  double x0 = 0.0, slope = 0.0, curve = 0.0, s = 0.0, e = 1.0;
  double at(double y) const {
    double t = y - 0.5;
    return x0 + slope * t + curve * t * t;
  }
};

double nearest_lane_distance(const std::vector<LaneCurve>& curves, double x,
                             double y) {
  double best = 1.0;
  for (const LaneCurve& c : curves) {
    best = std::min(best, std::abs(x - c.at(y)));
  }
  return best;
}

Category roll_vehicle_category(Rng& rng) {
  double u = rng.uniform();
  if (u < 0.6) return Category::car;
  if (u < 0.85) return Category::truck;
  return Category::bus;
}

Category roll_person_category(Rng& rng) {
  return rng.uniform() < 0.8 ? Category::person : Category::rider;
}

void fill_rect(std::vector<double>& img, Index w, Index h, double x1, double y1,
               double x2, double y2, double value) {
  Index px1 = static_cast<Index>(std::floor(x1 * static_cast<double>(w)));
  Index py1 = static_cast<Index>(std::floor(y1 * static_cast<double>(h)));
  Index px2 = static_cast<Index>(std::ceil(x2 * static_cast<double>(w)));
  Index py2 = static_cast<Index>(std::ceil(y2 * static_cast<double>(h)));
  px1 = std::clamp<Index>(px1, 0, w);
  px2 = std::clamp<Index>(px2, 0, w);
  py1 = std::clamp<Index>(py1, 0, h);
  py2 = std::clamp<Index>(py2, 0, h);
  for (Index y = py1; y < py2; ++y) {
    for (Index x = px1; x < px2; ++x) {
      img[static_cast<std::size_t>(y * w + x)] = value;
    }
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out.good()) throw IoError("failed writing: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

std::string box_mode_name(BoxMode mode) {
  switch (mode) {
    case BoxMode::correlated: return "correlated";
    case BoxMode::random: return "random";
    case BoxMode::none: return "none";
  }
  throw Error("box_mode_name: invalid mode");
}

BoxMode box_mode_from_token(const std::string& token) {
  if (token == "correlated") return BoxMode::correlated;
  if (token == "random") return BoxMode::random;
  if (token == "none") return BoxMode::none;
  throw ParseError("unknown box mode '" + token +
                   "' (expected correlated|random|none)");
}

void SceneSpec::validate() const {
  if (width < 16 || height < 16) {
    throw Error("SceneSpec: canvas must be at least 16x16");
  }
  if (min_lanes < 1 || max_lanes > 4 || min_lanes > max_lanes) {
    throw Error("SceneSpec: lane count range must satisfy 1 <= min <= max <= 4");
  }
  if (max_curvature < 0.0 || max_curvature > 1.0) {
    throw Error("SceneSpec: max_curvature must lie in [0,1]");
  }
  if (occlusion_prob < 0.0 || occlusion_prob > 1.0) {
    throw Error("SceneSpec: occlusion_prob must lie in [0,1]");
  }
  if (crowded_prob < 0.0 || night_prob < 0.0 ||
      crowded_prob + night_prob > 1.0) {
    throw Error("SceneSpec: tag mix probabilities must be a sub-distribution");
  }
}

Scene gen_scene(const SceneSpec& spec, Index index) {
  spec.validate();
  if (index < 0) throw Error("gen_scene: index must be nonnegative");
  Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(index));

  Scene scene;
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%06lld", static_cast<long long>(index));
    scene.frame_id = buf;
  }

  double tag_roll = rng.uniform();
  scene.tag = tag_roll < spec.crowded_prob           ? "crowded"
              : tag_roll < spec.crowded_prob + spec.night_prob ? "night"
                                                               : "normal";
  Palette pal = palette_for(scene.tag);
  const Index w = spec.width, h = spec.height;

  // Road background with a mild vertical gradient and per-pixel noise.
  std::vector<double> img(static_cast<std::size_t>(w * h));
  for (Index y = 0; y < h; ++y) {
    double base = pal.base + pal.gradient * (static_cast<double>(y) /
                                             static_cast<double>(h));
    for (Index x = 0; x < w; ++x) {
      img[static_cast<std::size_t>(y * w + x)] = base + rng.uniform(-0.04, 0.04);
    }
  }

  // Lane geometry: jittered slots keep 1-4 quadratics separated.
  int n_lanes = static_cast<int>(rng.uniform_int(spec.min_lanes, spec.max_lanes));
  std::vector<LaneCurve> curves;
  for (int i = 0; i < n_lanes; ++i) {
    LaneCurve c;
    c.x0 = (static_cast<double>(i) + 1.0) / (static_cast<double>(n_lanes) + 1.0) +
           rng.uniform(-0.06, 0.06);
    c.slope = rng.uniform(-0.35, 0.35);
    c.curve = rng.uniform(-spec.max_curvature, spec.max_curvature);
    c.s = rng.uniform(0.0, 0.2);
    c.e = rng.uniform(0.8, 1.0);
    curves.push_back(c);
  }

  for (const LaneCurve& c : curves) {
    Lane lane;
    lane.s = c.s;
    lane.e = c.e;
    for (Index row = 0; row < kGridRows; ++row) {
      lane.xs[static_cast<std::size_t>(row)] =
          lane.row_valid(row) ? std::clamp(c.at(grid_y(row)), 0.02, 0.98) : 0.0;
    }
    scene.lanes.push_back(lane);
  }

  // Anti-aliased lane strokes, ~3 px wide.
  for (const LaneCurve& c : curves) {
    for (Index py = 0; py < h; ++py) {
      double y = (static_cast<double>(py) + 0.5) / static_cast<double>(h);
      if (y < c.s || y > c.e) continue;
      double cx = std::clamp(c.at(y), 0.02, 0.98) * static_cast<double>(w);
      Index lo = std::max<Index>(0, static_cast<Index>(std::floor(cx - 2.5)));
      Index hi = std::min<Index>(w - 1, static_cast<Index>(std::ceil(cx + 2.5)));
      for (Index px = lo; px <= hi; ++px) {
        double d = std::abs(static_cast<double>(px) + 0.5 - cx);
        double alpha = std::clamp(1.6 - d, 0.0, 1.0);
        auto& v = img[static_cast<std::size_t>(py * w + px)];
        v += alpha * (pal.paint - v);
      }
    }
  }

  // Occasional occluder patch sitting on a lane.
  for (const LaneCurve& c : curves) {
    if (rng.uniform() >= spec.occlusion_prob) continue;
    double yc = rng.uniform(c.s + 0.1, c.e - 0.1);
    double xc = std::clamp(c.at(yc), 0.05, 0.95);
    double ow = rng.uniform(0.06, 0.14), oh = rng.uniform(0.08, 0.2);
    fill_rect(img, w, h, xc - ow / 2, yc - oh / 2, xc + ow / 2, yc + oh / 2,
              pal.occluder);
  }

  // Detection boxes. Vehicle count doubles as the "Crowded" knob.
  if (spec.box_mode != BoxMode::none) {
    int vehicles = scene.tag == "crowded"
                       ? static_cast<int>(rng.uniform_int(4, 7))
                       : static_cast<int>(rng.uniform_int(1, 3));
    int people = scene.tag == "crowded"
                     ? static_cast<int>(rng.uniform_int(1, 2))
                     : (rng.uniform() < 0.35 ? 1 : 0);

    for (int i = 0; i < vehicles; ++i) {
      bool near_lane = spec.box_mode == BoxMode::correlated &&
                       rng.uniform() >= 0.05;  // 5% distractors
      double xc, yc;
      if (near_lane) {
        const LaneCurve& c = curves[static_cast<std::size_t>(
            rng.uniform_int(0, n_lanes - 1))];
        yc = rng.uniform(c.s + 0.05, c.e - 0.05);
        xc = std::clamp(c.at(yc) + rng.uniform(-0.08, 0.08), 0.06, 0.94);
      } else {
        xc = rng.uniform(0.06, 0.94);
        yc = rng.uniform(0.15, 0.9);
      }
      double bw = rng.uniform(0.08, 0.2), bh = rng.uniform(0.1, 0.24);
      DetectionBox box;
      box.x1 = std::clamp(xc - bw / 2, 0.0, 1.0);
      box.y1 = std::clamp(yc - bh / 2, 0.0, 1.0);
      box.x2 = std::clamp(xc + bw / 2, 0.0, 1.0);
      box.y2 = std::clamp(yc + bh / 2, 0.0, 1.0);
      box.score = rng.uniform(0.3, 1.0);
      box.category = roll_vehicle_category(rng);
      scene.boxes.push_back(box);
      scene.placement_log.push_back({true, nearest_lane_distance(curves, xc, yc)});
      fill_rect(img, w, h, box.x1, box.y1, box.x2, box.y2,
                std::clamp(pal.vehicle + rng.uniform(-0.08, 0.08), 0.0, 1.0));
    }

    for (int i = 0; i < people; ++i) {
      double yc = rng.uniform(0.3, 0.9);
      double xc = rng.uniform(0.04, 0.96);
      if (spec.box_mode == BoxMode::correlated) {
        // People stay off-road: resample toward the largest lane clearance.
        double best_d = nearest_lane_distance(curves, xc, yc);
        for (int attempt = 0; attempt < 20 && best_d <= 0.12; ++attempt) {
          double cand = rng.uniform(0.04, 0.96);
          double d = nearest_lane_distance(curves, cand, yc);
          if (d > best_d) {
            best_d = d;
            xc = cand;
          }
        }
      }
      double bw = rng.uniform(0.025, 0.05), bh = rng.uniform(0.08, 0.16);
      DetectionBox box;
      box.x1 = std::clamp(xc - bw / 2, 0.0, 1.0);
      box.y1 = std::clamp(yc - bh / 2, 0.0, 1.0);
      box.x2 = std::clamp(xc + bw / 2, 0.0, 1.0);
      box.y2 = std::clamp(yc + bh / 2, 0.0, 1.0);
      box.score = rng.uniform(0.3, 1.0);
      box.category = roll_person_category(rng);
      scene.boxes.push_back(box);
      scene.placement_log.push_back(
          {false, nearest_lane_distance(curves, xc, yc)});
      fill_rect(img, w, h, box.x1, box.y1, box.x2, box.y2,
                std::clamp(pal.person + rng.uniform(-0.08, 0.08), 0.0, 1.0));
    }
  }

  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  scene.image = Tensor::from_values({h, w, 1}, std::move(img));
  return scene;
}

DatasetManifest gen_dataset(const SceneSpec& spec, Index n,
                            const std::string& root, int jobs) {
  spec.validate();
  if (n < 1) throw Error("gen_dataset: n must be >= 1");
  if (jobs < 1) throw Error("gen_dataset: jobs must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(root) / "images", ec);
  if (!ec) fs::create_directories(fs::path(root) / "gt", ec);
  if (ec) {
    throw IoError("cannot create dataset directories under " + root + ": " +
                  ec.message());
  }

  // Seeded-shuffle split: the first n/10 shuffled indices validate.
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng split_rng = Rng(spec.seed).fork(kSplitStreamId);
  split_rng.shuffle(order);
  std::vector<std::string> split_of(static_cast<std::size_t>(n), "train");
  for (Index i = 0; i < n / 10; ++i) {
    split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = "val";
  }

  DatasetManifest manifest;
  manifest.seed = spec.seed;
  manifest.width = spec.width;
  manifest.height = spec.height;

  std::map<std::string, std::vector<DetectionBox>> detections;
  std::ostringstream manifest_text;
  {
    nlohmann::json header;
    header["type"] = "laneformer-dataset";
    header["version"] = 1;
    header["seed"] = spec.seed;
    header["width"] = spec.width;
    header["height"] = spec.height;
    header["frames"] = n;
    header["box_mode"] = box_mode_name(spec.box_mode);
    manifest_text << header.dump() << "\n";
  }

  // gen_scene is pure in (spec, index), so frames can be produced on a
  // worker pool and written in index order with byte-identical results.
  std::vector<Scene> scenes(static_cast<std::size_t>(n));
  if (jobs > 1) {
    std::atomic<Index> next{0};
    auto worker = [&] {
      for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        scenes[static_cast<std::size_t>(i)] = gen_scene(spec, i);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  } else {
    for (Index i = 0; i < n; ++i) {
      scenes[static_cast<std::size_t>(i)] = gen_scene(spec, i);
    }
  }

  for (Index i = 0; i < n; ++i) {
    Scene& scene = scenes[static_cast<std::size_t>(i)];
    FrameRecord record;
    record.frame_id = scene.frame_id;
    record.image_path = "images/" + scene.frame_id + ".pgm";
    record.gt_path = "gt/" + scene.frame_id + ".lines.txt";
    record.tag = scene.tag;
    record.split = split_of[static_cast<std::size_t>(i)];

    write_pgm((fs::path(root) / record.image_path).string(), scene.image);
    write_text_file((fs::path(root) / record.gt_path).string(),
                    emit_culane_lines(scene.lanes, static_cast<double>(spec.width),
                                      static_cast<double>(spec.height)));
    detections[scene.frame_id] = scene.boxes;

    nlohmann::json line;
    line["frame"] = record.frame_id;
    line["image"] = record.image_path;
    line["gt"] = record.gt_path;
    line["tag"] = record.tag;
    line["split"] = record.split;
    manifest_text << line.dump() << "\n";
    manifest.frames.push_back(std::move(record));
  }

  write_text_file((fs::path(root) / "detections.txt").string(),
                  emit_detections(detections));
  write_text_file((fs::path(root) / "manifest.jsonl").string(),
                  manifest_text.str());
  return manifest;
}

DatasetManifest load_manifest(const std::string& root) {
  namespace fs = std::filesystem;
  std::string text = read_text_file((fs::path(root) / "manifest.jsonl").string());
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError("empty dataset manifest in " + root);
  }
  DatasetManifest manifest;
  try {
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("type") != "laneformer-dataset") {
      throw ParseError("not a laneformer dataset manifest");
    }
    manifest.seed = header.at("seed").get<std::uint64_t>();
    manifest.width = header.at("width").get<Index>();
    manifest.height = header.at("height").get<Index>();
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      FrameRecord record;
      record.frame_id = j.at("frame").get<std::string>();
      record.image_path = j.at("image").get<std::string>();
      record.gt_path = j.at("gt").get<std::string>();
      record.tag = j.at("tag").get<std::string>();
      record.split = j.at("split").get<std::string>();
      manifest.frames.push_back(std::move(record));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed dataset manifest: ") + e.what());
  }
  return manifest;
}

std::vector<LoadedFrame> load_split(const std::string& root,
                                    const std::string& split) {
  namespace fs = std::filesystem;
  DatasetManifest manifest = load_manifest(root);
  std::map<std::string, std::vector<DetectionBox>> detections;
  fs::path det_path = fs::path(root) / "detections.txt";
  if (fs::exists(det_path)) {
    detections = parse_detections(read_text_file(det_path.string()));
  }
  std::vector<LoadedFrame> frames;
  for (const FrameRecord& record : manifest.frames) {
    if (!split.empty() && record.split != split) continue;
    LoadedFrame frame;
    frame.frame_id = record.frame_id;
    frame.tag = record.tag;
    frame.split = record.split;
    frame.image = read_pgm((fs::path(root) / record.image_path).string());
    frame.lanes = parse_culane_lines(
        read_text_file((fs::path(root) / record.gt_path).string()),
        static_cast<double>(manifest.width), static_cast<double>(manifest.height));
    auto it = detections.find(record.frame_id);
    if (it != detections.end()) frame.boxes = it->second;
    frames.push_back(std::move(frame));
  }
  return frames;
}

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw Error("write_pgm: expected a (height, width, 1) image, got " +
                shape_to_string(image.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const Index h = image.dim(0), w = image.dim(1);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h * w));
  auto values = image.values();
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(
        std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) throw IoError("failed writing: " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  auto next_token = [&]() {
    std::string token;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {  // comment to end of line
        while ((c = in.get()) != EOF && c != '\n') {}
        continue;
      }
      if (std::isspace(c)) {
        if (!token.empty()) return token;
        continue;
      }
      token.push_back(static_cast<char>(c));
    }
    return token;
  };
  if (next_token() != "P5") throw ParseError("not a binary PGM: " + path);
  auto parse_dim = [&](const std::string& what) {
    std::string token = next_token();
    try {
      std::size_t pos = 0;
      long long v = std::stoll(token, &pos);
      if (pos != token.size() || v <= 0) throw std::invalid_argument(what);
      return static_cast<Index>(v);
    } catch (const std::exception&) {
      throw ParseError("bad PGM " + what + " in " + path);
    }
  };
  Index w = parse_dim("width");
  Index h = parse_dim("height");
  Index maxval = parse_dim("maxval");
  if (maxval != 255) {
    throw ParseError("unsupported PGM maxval " + std::to_string(maxval) +
                     " in " + path);
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ParseError("truncated PGM pixel data in " + path);
  }
  std::vector<double> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    values[i] = static_cast<double>(bytes[i]) / 255.0;
  }
  return Tensor::from_values({h, w, 1}, std::move(values));
}

}  // namespace laneformer
