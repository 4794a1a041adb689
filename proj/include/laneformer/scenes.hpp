// Deterministic toy road-scene generator: rasterized lane images, ground
// truth, and detection boxes whose placement can correlate with the lanes.
#pragma once

#include "laneformer/detection.hpp"
#include "laneformer/lane.hpp"
#include "laneformer/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace laneformer {

/// How detection boxes relate to the lanes in a generated scene.
enum class BoxMode {
  correlated,  // vehicles hug lanes, people stay off-road
  random,      // boxes land anywhere
  none,        // no boxes at all
};

std::string box_mode_name(BoxMode mode);
BoxMode box_mode_from_token(const std::string& token);  // throws ParseError

struct SceneSpec {
  std::uint64_t seed = 1;
  Index width = 128;
  Index height = 64;
  int min_lanes = 1;
  int max_lanes = 4;
  double max_curvature = 0.25;  // |quadratic coefficient| in normalized units
  double occlusion_prob = 0.15;
  BoxMode box_mode = BoxMode::correlated;
  // Scene-tag mix; the remaining probability mass is "normal".
  double crowded_prob = 0.2;
  double night_prob = 0.2;

  void validate() const;  // throws Error on nonsense values
};

/// One audit entry per generated box: whether it was a vehicle and how far
/// its center sat from the nearest lane center at its row, in normalized x.
struct BoxPlacement {
  bool vehicle = false;
  double lane_distance = 0.0;
};

struct Scene {
  std::string frame_id;
  Tensor image;  // height x width x 1, values in [0,1]
  std::vector<Lane> lanes;
  std::vector<DetectionBox> boxes;
  std::string tag;  // "normal" | "crowded" | "night"
  std::vector<BoxPlacement> placement_log;
};

/// Renders scene `index` of the spec. Each index derives an independent
/// stream from the spec seed, so generation can fan out across indices.
Scene gen_scene(const SceneSpec& spec, Index index);

struct FrameRecord {
  std::string frame_id;
  std::string image_path;  // relative to the dataset root
  std::string gt_path;
  std::string tag;
  std::string split;  // "train" | "val"
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  Index width = 0;
  Index height = 0;
  std::vector<FrameRecord> frames;
};

/// Stream id (forked off the spec seed) that drives the train/val shuffle:
/// frame indices are Fisher-Yates shuffled from the top with
/// uniform_int(0, i-1) draws, and the first n/10 entries validate.
inline constexpr std::uint64_t kSplitStreamId = 0x5917;

/// Writes images/, gt/, detections.txt, and manifest.jsonl under `root`.
/// One frame in ten (rounded down) goes to the validation split, chosen by
/// a seeded shuffle of the frame indices. `jobs` sizes a worker pool for
/// scene generation; output bytes do not depend on it.
DatasetManifest gen_dataset(const SceneSpec& spec, Index n,
                            const std::string& root, int jobs = 1);

/// Reads manifest.jsonl back; paths stay relative to `root`.
DatasetManifest load_manifest(const std::string& root);

struct LoadedFrame {
  std::string frame_id;
  Tensor image;
  std::vector<Lane> lanes;
  std::vector<DetectionBox> boxes;
  std::string tag;
  std::string split;
};

/// Loads every frame of one split ("train", "val", or "" for everything).
std::vector<LoadedFrame> load_split(const std::string& root, const std::string& split);

/// 8-bit binary PGM with values scaled from [0,1].
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);

}  // namespace laneformer
