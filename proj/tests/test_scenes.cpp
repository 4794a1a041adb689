#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "laneformer/rng.hpp"
#include "laneformer/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace laneformer;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("spec validation rejects nonsense") {
  SceneSpec spec;
  spec.min_lanes = 0;
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = SceneSpec{};
  spec.max_lanes = 5;
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = SceneSpec{};
  spec.crowded_prob = 0.7;
  spec.night_prob = 0.5;  // mix exceeds 1
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = SceneSpec{};
  spec.occlusion_prob = 1.5;
  CHECK_THROWS_AS(spec.validate(), Error);
  CHECK_THROWS_AS(gen_scene(SceneSpec{}, -1), Error);
}

TEST_CASE("box mode tokens round-trip and reject junk") {
  for (BoxMode mode : {BoxMode::correlated, BoxMode::random, BoxMode::none}) {
    CHECK(box_mode_from_token(box_mode_name(mode)) == mode);
  }
  CHECK_THROWS_AS(box_mode_from_token("sometimes"), ParseError);
}

TEST_CASE("same (spec, index) yields identical bytes") {
  SceneSpec spec;
  spec.seed = 77;
  Scene a = gen_scene(spec, 12);
  Scene b = gen_scene(spec, 12);

  CHECK(a.frame_id == b.frame_id);
  CHECK(a.tag == b.tag);
  auto av = a.image.values();
  auto bv = b.image.values();
  REQUIRE(av.size() == bv.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] != bv[i]) FAIL("image diverges at pixel " << i);
  }
  REQUIRE(a.lanes.size() == b.lanes.size());
  for (std::size_t i = 0; i < a.lanes.size(); ++i) {
    CHECK(a.lanes[i].s == b.lanes[i].s);
    CHECK(a.lanes[i].e == b.lanes[i].e);
    CHECK((a.lanes[i].xs == b.lanes[i].xs));
  }
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].x1 == b.boxes[i].x1);
    CHECK(a.boxes[i].score == b.boxes[i].score);
    CHECK(a.boxes[i].category == b.boxes[i].category);
  }

  // Byte-identical through serialization too.
  TempDir dir("scenes_tmp_determinism");
  write_pgm((dir.path / "a.pgm").string(), a.image);
  write_pgm((dir.path / "b.pgm").string(), b.image);
  CHECK(slurp(dir.path / "a.pgm") == slurp(dir.path / "b.pgm"));

  // Different indices diverge (the streams are independent).
  Scene c = gen_scene(spec, 13);
  bool same = a.lanes.size() == c.lanes.size();
  if (same) {
    auto cv = c.image.values();
    same = std::equal(av.begin(), av.end(), cv.begin());
  }
  CHECK(!same);
}

TEST_CASE("lane-count range [1,1] with zero curvature gives one straight lane") {
  SceneSpec spec;
  spec.seed = 5;
  spec.min_lanes = 1;
  spec.max_lanes = 1;
  spec.max_curvature = 0.0;
  for (Index index = 0; index < 10; ++index) {
    Scene scene = gen_scene(spec, index);
    REQUIRE(scene.lanes.size() == 1);
    const Lane& lane = scene.lanes[0];
    // Constant slope across every consecutive valid-row pair.
    double slope = 0.0;
    bool have_slope = false;
    for (Index row = 0; row + 1 < kGridRows; ++row) {
      if (!lane.row_valid(row) || !lane.row_valid(row + 1)) continue;
      double d = lane.xs[static_cast<std::size_t>(row + 1)] -
                 lane.xs[static_cast<std::size_t>(row)];
      if (!have_slope) {
        slope = d;
        have_slope = true;
      } else {
        CHECK(std::abs(d - slope) <= 1e-9);
      }
    }
    CHECK(have_slope);
  }
}

TEST_CASE("generated lanes and boxes satisfy their invariants") {
  SceneSpec spec;
  spec.seed = 31;
  int total_lanes = 0, total_boxes = 0;
  for (Index index = 0; index < 40; ++index) {
    Scene scene = gen_scene(spec, index);
    REQUIRE(scene.lanes.size() >= 1);
    REQUIRE(scene.lanes.size() <= 4);
    for (const Lane& lane : scene.lanes) {
      ++total_lanes;
      CHECK(lane.s <= lane.e);
      CHECK(lane.s >= 0.0);
      CHECK(lane.e <= 1.0);
      CHECK(lane.valid_rows() >= 1);
      for (Index row = 0; row < kGridRows; ++row) {
        double x = lane.xs[static_cast<std::size_t>(row)];
        if (lane.row_valid(row)) {
          CHECK(x >= 0.0);
          CHECK(x <= 1.0);
        } else {
          CHECK(x == 0.0);
        }
      }
    }
    REQUIRE(scene.boxes.size() == scene.placement_log.size());
    for (const DetectionBox& box : scene.boxes) {
      ++total_boxes;
      CHECK(box.x1 < box.x2);
      CHECK(box.y1 < box.y2);
      CHECK(box.score >= 0.3);
      CHECK(box.score <= 1.0);
    }
    for (double v : scene.image.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK((scene.tag == "normal" || scene.tag == "crowded" || scene.tag == "night"));
  }
  CHECK(total_lanes > 40);
  CHECK(total_boxes > 40);
}

TEST_CASE("correlated mode puts at least 90% of vehicles within 0.1 of a lane") {
  SceneSpec spec;
  spec.seed = 99;
  spec.box_mode = BoxMode::correlated;
  int vehicles = 0, near = 0, people = 0;
  for (Index index = 0; index < 60; ++index) {
    Scene scene = gen_scene(spec, index);
    for (const BoxPlacement& entry : scene.placement_log) {
      if (entry.vehicle) {
        ++vehicles;
        if (entry.lane_distance <= 0.1) ++near;
      } else {
        ++people;
      }
    }
  }
  REQUIRE(vehicles > 50);
  CHECK(static_cast<double>(near) >= 0.9 * static_cast<double>(vehicles));
  CHECK(people > 0);

  // The audit only gates vehicles; random mode has no such concentration.
  spec.box_mode = BoxMode::random;
  int r_vehicles = 0, r_near = 0;
  for (Index index = 0; index < 60; ++index) {
    Scene scene = gen_scene(spec, index);
    for (const BoxPlacement& entry : scene.placement_log) {
      if (entry.vehicle) {
        ++r_vehicles;
        if (entry.lane_distance <= 0.1) ++r_near;
      }
    }
  }
  REQUIRE(r_vehicles > 50);
  CHECK(static_cast<double>(r_near) < 0.75 * static_cast<double>(r_vehicles));

  spec.box_mode = BoxMode::none;
  CHECK(gen_scene(spec, 0).boxes.empty());
}

TEST_CASE("emitted ground truth parses back within half a pixel") {
  SceneSpec spec;
  spec.seed = 13;
  for (Index index = 0; index < 8; ++index) {
    Scene scene = gen_scene(spec, index);
    double w = static_cast<double>(spec.width);
    double h = static_cast<double>(spec.height);
    std::vector<Lane> parsed =
        parse_culane_lines(emit_culane_lines(scene.lanes, w, h), w, h);
    REQUIRE(parsed.size() == scene.lanes.size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
      for (Index row = 0; row < kGridRows; ++row) {
        if (!scene.lanes[i].row_valid(row) || !parsed[i].row_valid(row)) continue;
        double delta = std::abs(parsed[i].xs[static_cast<std::size_t>(row)] -
                                scene.lanes[i].xs[static_cast<std::size_t>(row)]);
        CHECK(delta * w <= 0.5);
      }
    }
  }
}

TEST_CASE("gen_dataset n=1 lists one frame with all files present") {
  TempDir dir("scenes_tmp_single");
  SceneSpec spec;
  spec.seed = 3;
  DatasetManifest manifest = gen_dataset(spec, 1, dir.path.string());
  REQUIRE(manifest.frames.size() == 1);
  const FrameRecord& record = manifest.frames[0];
  CHECK(record.split == "train");  // 1/10 rounds down to zero val frames
  CHECK(fs::exists(dir.path / record.image_path));
  CHECK(fs::exists(dir.path / record.gt_path));
  CHECK(fs::exists(dir.path / "detections.txt"));
  CHECK(fs::exists(dir.path / "manifest.jsonl"));

  DatasetManifest reloaded = load_manifest(dir.path.string());
  REQUIRE(reloaded.frames.size() == 1);
  CHECK(reloaded.frames[0].frame_id == record.frame_id);
  CHECK(reloaded.width == spec.width);
  CHECK(reloaded.seed == spec.seed);
}

TEST_CASE("n=200 default spec splits 180/20 by the seeded shuffle") {
  TempDir dir("scenes_tmp_split");
  SceneSpec spec;
  spec.seed = 4242;
  DatasetManifest manifest = gen_dataset(spec, 200, dir.path.string());
  REQUIRE(manifest.frames.size() == 200);

  // Independent oracle: replay the documented Fisher-Yates over the split
  // stream and mark the first 20 shuffled indices as validation.
  std::vector<Index> order(200);
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = Rng(spec.seed).fork(kSplitStreamId);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::string> expected(200, "train");
  for (int i = 0; i < 20; ++i) {
    expected[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = "val";
  }

  int train = 0, val = 0;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i) {
    CHECK(manifest.frames[i].split == expected[i]);
    (manifest.frames[i].split == "val" ? val : train)++;
  }
  CHECK(train == 180);
  CHECK(val == 20);
}

TEST_CASE("gen_dataset is deterministic across runs") {
  SceneSpec spec;
  spec.seed = 8;
  TempDir a("scenes_tmp_run_a");
  TempDir b("scenes_tmp_run_b");
  gen_dataset(spec, 5, a.path.string());
  gen_dataset(spec, 5, b.path.string(), /*jobs=*/3);  // pool must not leak into bytes
  for (const char* name :
       {"manifest.jsonl", "detections.txt", "images/scene_000003.pgm",
        "gt/scene_000003.lines.txt"}) {
    CHECK(slurp(a.path / name) == slurp(b.path / name));
  }
}

TEST_CASE("loading a split recovers images, lanes, and boxes") {
  TempDir dir("scenes_tmp_load");
  SceneSpec spec;
  spec.seed = 21;
  gen_dataset(spec, 12, dir.path.string());

  auto train = load_split(dir.path.string(), "train");
  auto val = load_split(dir.path.string(), "val");
  auto all = load_split(dir.path.string(), "");
  CHECK(train.size() == 11);  // 12/10 = 1 val frame
  CHECK(val.size() == 1);
  CHECK(all.size() == 12);

  // Every loaded frame matches its regenerated scene after quantization.
  for (const LoadedFrame& frame : all) {
    Index index = std::stoll(frame.frame_id.substr(6));
    Scene scene = gen_scene(spec, index);
    CHECK(frame.tag == scene.tag);
    auto got = frame.image.values();
    auto want = scene.image.values();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      double quantized = std::lround(want[i] * 255.0) / 255.0;
      if (std::abs(got[i] - quantized) > 1e-12) {
        FAIL("pixel " << i << " of " << frame.frame_id << ": " << got[i]
                      << " vs " << quantized);
      }
    }
    REQUIRE(frame.lanes.size() == scene.lanes.size());
    REQUIRE(frame.boxes.size() == scene.boxes.size());
    for (std::size_t i = 0; i < frame.boxes.size(); ++i) {
      CHECK(std::abs(frame.boxes[i].x1 - scene.boxes[i].x1) <= 1e-7);
      CHECK(std::abs(frame.boxes[i].score - scene.boxes[i].score) <= 1e-7);
      CHECK(frame.boxes[i].category == scene.boxes[i].category);
    }
  }
}

TEST_CASE("pgm files survive a write/read/write round trip") {
  TempDir dir("scenes_tmp_pgm");
  SceneSpec spec;
  spec.seed = 55;
  Scene scene = gen_scene(spec, 2);
  fs::path first = dir.path / "one.pgm";
  fs::path second = dir.path / "two.pgm";
  write_pgm(first.string(), scene.image);
  Tensor reread = read_pgm(first.string());
  write_pgm(second.string(), reread);
  CHECK(slurp(first) == slurp(second));
  CHECK((reread.shape() == scene.image.shape()));
}

TEST_CASE("io errors are reported") {
  TempDir dir("scenes_tmp_errors");
  // A regular file cannot serve as a dataset root.
  fs::path blocker = dir.path / "blocker";
  std::ofstream(blocker).put('x');
  SceneSpec spec;
  CHECK_THROWS_AS(gen_dataset(spec, 1, (blocker / "nested").string()), IoError);

  CHECK_THROWS_AS(read_pgm((dir.path / "absent.pgm").string()), IoError);

  fs::path bad = dir.path / "bad.pgm";
  std::ofstream(bad, std::ios::binary) << "P6\n2 2\n255\n....";
  CHECK_THROWS_AS(read_pgm(bad.string()), ParseError);

  fs::path truncated = dir.path / "short.pgm";
  std::ofstream(truncated, std::ios::binary) << "P5\n4 4\n255\nab";
  CHECK_THROWS_AS(read_pgm(truncated.string()), ParseError);

  CHECK_THROWS_AS(load_manifest(dir.path.string()), IoError);
}
