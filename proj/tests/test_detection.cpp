#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "laneformer/detection.hpp"
#include "laneformer/error.hpp"
#include "laneformer/ops.hpp"
#include "laneformer/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

using namespace laneformer;

namespace {

DetectionBox make_box(double x1, double y1, double x2, double y2, double score,
                      Category cat = Category::car) {
  DetectionBox b;
  b.x1 = x1;
  b.y1 = y1;
  b.x2 = x2;
  b.y2 = y2;
  b.score = score;
  b.category = cat;
  return b;
}

DetectionBox random_box(Rng& rng) {
  double w = rng.uniform(0.05, 0.4);
  double h = rng.uniform(0.05, 0.4);
  double x1 = rng.uniform(0.0, 1.0 - w);
  double y1 = rng.uniform(0.0, 1.0 - h);
  return make_box(x1, y1, x1 + w, y1 + h, rng.uniform(0.3, 1.0),
                  static_cast<Category>(rng.uniform_int(1, 6)));
}

bool valid_padded(const DetectionBox& b) {
  return b.score == 0.0 && b.category == Category::padded &&
         b.x2 - b.x1 >= 0.05 && b.y2 - b.y1 >= 0.05 && b.x1 >= 0.0 &&
         b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0;
}

}  // namespace

TEST_CASE("select_and_pad fills an empty input with M padded boxes") {
  auto out = select_and_pad({}, 10, 0.6, 99);
  REQUIRE(out.size() == 10);
  for (const auto& b : out) CHECK(valid_padded(b));
  // Deterministic for a fixed seed.
  auto again = select_and_pad({}, 10, 0.6, 99);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(out[i].x1 == again[i].x1);
    CHECK(out[i].y2 == again[i].y2);
  }
}

TEST_CASE("select_and_pad drops the lowest scores beyond M") {
  // 12 boxes, scores 0.95 down to 0.62 in steps of 0.03.
  std::vector<DetectionBox> boxes;
  for (int i = 0; i < 12; ++i) {
    boxes.push_back(make_box(0.01 * i, 0.1, 0.01 * i + 0.2, 0.4, 0.95 - 0.03 * i));
  }
  auto out = select_and_pad(boxes, 10, 0.6, 1);
  REQUIRE(out.size() == 10);
  // The two lowest-scoring boxes (indices 10, 11) are gone; order preserved.
  for (int i = 0; i < 10; ++i) {
    CHECK(out[static_cast<std::size_t>(i)].score ==
          doctest::Approx(0.95 - 0.03 * i));
  }
}

TEST_CASE("select_and_pad keeps exactly-M inputs untouched and in order") {
  std::vector<DetectionBox> boxes;
  for (int i = 0; i < 5; ++i) {
    boxes.push_back(make_box(0.1 * i, 0.2, 0.1 * i + 0.1, 0.5, 0.7 + 0.01 * i));
  }
  auto out = select_and_pad(boxes, 5, 0.6, 1);
  REQUIRE(out.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(out[i].x1 == boxes[i].x1);
    CHECK(out[i].score == boxes[i].score);
  }
}

TEST_CASE("select_and_pad removes sub-threshold boxes before padding") {
  std::vector<DetectionBox> boxes = {
      make_box(0.0, 0.0, 0.2, 0.2, 0.95),
      make_box(0.3, 0.3, 0.5, 0.5, 0.2),  // below threshold
      make_box(0.6, 0.6, 0.8, 0.8, 0.7),
  };
  auto out = select_and_pad(boxes, 4, 0.6, 5);
  REQUIRE(out.size() == 4);
  CHECK(out[0].score == 0.95);
  CHECK(out[1].score == 0.7);
  CHECK(valid_padded(out[2]));
  CHECK(valid_padded(out[3]));
}

TEST_CASE("select_and_pad breaks score ties by input order") {
  std::vector<DetectionBox> boxes;
  for (int i = 0; i < 4; ++i) {
    boxes.push_back(make_box(0.1 * i, 0.0, 0.1 * i + 0.1, 0.3, 0.8));
  }
  auto out = select_and_pad(boxes, 2, 0.6, 1);
  REQUIRE(out.size() == 2);
  CHECK(out[0].x1 == doctest::Approx(0.0));
  CHECK(out[1].x1 == doctest::Approx(0.1));
}

TEST_CASE("select_and_pad always returns exactly M on randomized inputs") {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<DetectionBox> boxes;
    int n = static_cast<int>(rng.uniform_int(0, 25));
    for (int i = 0; i < n; ++i) boxes.push_back(random_box(rng));
    Index m = rng.uniform_int(1, 15);
    auto out = select_and_pad(boxes, m, 0.6, rng.next_u64());
    CHECK(static_cast<Index>(out.size()) == m);
    for (const auto& b : out) {
      if (b.category == Category::padded) CHECK(valid_padded(b));
    }
  }
  CHECK_THROWS_AS(select_and_pad({}, 0, 0.6, 1), Error);
}

TEST_CASE("encode_box lays out corners then the 7-way one-hot") {
  auto padded = encode_box(make_box(0.1, 0.1, 0.2, 0.2, 0.0, Category::padded));
  REQUIRE(padded.size() == 11);
  std::vector<double> expect = {0.1, 0.1, 0.2, 0.2, 1, 0, 0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < 11; ++i) CHECK(padded[i] == expect[i]);

  auto car = encode_box(make_box(0.0, 0.0, 1.0, 1.0, 0.9, Category::car));
  std::vector<double> expect_car = {0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0};
  for (std::size_t i = 0; i < 11; ++i) CHECK(car[i] == expect_car[i]);

  // Length is 11 and the one-hot has exactly one 1 for every category.
  for (int c = 0; c < kNumCategories; ++c) {
    auto v = encode_box(make_box(0.2, 0.2, 0.4, 0.4, 0.5, static_cast<Category>(c)));
    REQUIRE(v.size() == 11);
    double sum = 0.0;
    for (std::size_t i = 4; i < 11; ++i) sum += v[i];
    CHECK(sum == 1.0);
    CHECK(v[4 + static_cast<std::size_t>(c)] == 1.0);
  }

  // The category ablation zeroes the one-hot but keeps the arity.
  auto no_cat = encode_box(make_box(0.2, 0.2, 0.4, 0.4, 0.5, Category::bus), false);
  REQUIRE(no_cat.size() == 11);
  for (std::size_t i = 4; i < 11; ++i) CHECK(no_cat[i] == 0.0);
}

TEST_CASE("bbox_embeddings applies the perceptron row by row") {
  std::vector<DetectionBox> boxes = {
      make_box(0.1, 0.2, 0.3, 0.4, 0.9, Category::car),
      make_box(0.5, 0.1, 0.9, 0.6, 0.8, Category::person),
      make_box(0.5, 0.1, 0.9, 0.6, 0.8, Category::person),
  };
  const Index dp = 4;

  // Zero weights: all-zero embeddings.
  Tensor z0 = bbox_embeddings(boxes, Tensor::zeros({11, dp}), Tensor::zeros({dp}));
  for (Index i = 0; i < z0.size(); ++i) CHECK(z0.at(i) == 0.0);

  // Random weights: match an elementwise matrix-vector oracle, and identical
  // boxes produce identical rows.
  Rng rng(7);
  std::vector<double> wv(11 * dp), bv(dp);
  for (double& v : wv) v = rng.uniform(-1.0, 1.0);
  for (double& v : bv) v = rng.uniform(-1.0, 1.0);
  Tensor w = Tensor::from_values({11, dp}, std::vector<double>(wv));
  Tensor b = Tensor::from_values({dp}, std::vector<double>(bv));
  Tensor z = bbox_embeddings(boxes, w, b);
  REQUIRE((z.shape() == Shape{3, dp}));
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    auto enc = encode_box(boxes[n]);
    for (Index j = 0; j < dp; ++j) {
      double acc = bv[static_cast<std::size_t>(j)];
      for (std::size_t i = 0; i < 11; ++i) {
        acc += enc[i] * wv[i * static_cast<std::size_t>(dp) + static_cast<std::size_t>(j)];
      }
      double expect = acc > 0.0 ? acc : 0.0;  // relu
      CHECK(z(static_cast<Index>(n), j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK(z(1, 0) == z(2, 0));
  CHECK(z(1, dp - 1) == z(2, dp - 1));
}

TEST_CASE("roi_embeddings zero-score boxes reduce to relu(bias)") {
  Rng rng(11);
  Tensor f = Tensor::zeros({8, 16, 2});
  for (Index i = 0; i < f.size(); ++i) f.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(0.0, 1.0);
  const Index roi = 3, dp = 5;
  Index flat = roi * roi * 2;
  Tensor w = Tensor::zeros({flat, dp});
  Tensor b = Tensor::zeros({dp});
  for (Index i = 0; i < w.size(); ++i) w.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);
  for (Index i = 0; i < dp; ++i) b.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);

  std::vector<DetectionBox> boxes = {
      make_box(0.1, 0.1, 0.6, 0.8, 0.0, Category::padded),
      make_box(0.2, 0.2, 0.7, 0.9, 1.0, Category::car),
  };
  auto res = roi_embeddings(f, boxes, 128.0, 64.0, 1.0 / 8.0, roi, w, b);
  CHECK(res.degenerate_boxes == 0);
  for (Index j = 0; j < dp; ++j) {
    double expect = b.at(j) > 0.0 ? b.at(j) : 0.0;
    CHECK(res.z_r(0, j) == doctest::Approx(expect).epsilon(1e-12));
  }

  // score=1 equals the unweighted path computed explicitly.
  Tensor roi_feat = roi_align(f, BoxPx{0.2 * 128 / 8, 0.2 * 64 / 8, 0.7 * 128 / 8, 0.9 * 64 / 8}, roi, 1.0);
  Tensor expect_row = relu(linear(reshape(roi_feat, {1, flat}), w, b));
  for (Index j = 0; j < dp; ++j) {
    CHECK(res.z_r(1, j) == doctest::Approx(expect_row.at(j)).epsilon(1e-9));
  }
}

TEST_CASE("roi_embeddings weights features linearly by score") {
  // Identity perceptron (W = I, b = 0) exposes the pre-perceptron feature.
  Tensor f = Tensor::constant({8, 8, 1}, 2.0);
  const Index roi = 3;
  Index flat = roi * roi;
  Tensor w = Tensor::zeros({flat, flat});
  for (Index i = 0; i < flat; ++i) w.values_mut()[static_cast<std::size_t>(i * flat + i)] = 1.0;
  Tensor b = Tensor::zeros({flat});

  auto at_score = [&](double s) {
    std::vector<DetectionBox> boxes = {make_box(0.2, 0.2, 0.8, 0.8, s)};
    return roi_embeddings(f, boxes, 64.0, 64.0, 1.0 / 8.0, roi, w, b);
  };
  // Constant map c = 2, score 0.5: pre-perceptron feature is 0.5 * c = 1.
  auto half = at_score(0.5);
  for (Index j = 0; j < flat; ++j) CHECK(half.z_r(0, j) == doctest::Approx(1.0).epsilon(1e-12));
  // Linearity: doubling the score doubles the feature.
  auto a = at_score(0.4);
  auto d = at_score(0.8);
  for (Index j = 0; j < flat; ++j) {
    CHECK(std::abs(d.z_r(0, j) - 2.0 * a.z_r(0, j)) < 1e-9);
  }
  // score weighting disabled: the raw feature, independent of score.
  std::vector<DetectionBox> boxes = {make_box(0.2, 0.2, 0.8, 0.8, 0.37)};
  auto raw = roi_embeddings(f, boxes, 64.0, 64.0, 1.0 / 8.0, roi, w, b, false);
  for (Index j = 0; j < flat; ++j) CHECK(raw.z_r(0, j) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("roi_embeddings zeroes degenerate boxes and counts them") {
  Tensor f = Tensor::constant({4, 4, 1}, 1.0);
  Tensor w = Tensor::zeros({9, 2});
  for (Index i = 0; i < w.size(); ++i) w.values_mut()[static_cast<std::size_t>(i)] = 1.0;
  Tensor b = Tensor::zeros({2});
  std::vector<DetectionBox> boxes = {
      make_box(0.5, 0.2, 0.5, 0.8, 0.9),  // zero width
      make_box(0.1, 0.1, 0.9, 0.9, 0.9),
  };
  auto res = roi_embeddings(f, boxes, 32.0, 32.0, 1.0 / 8.0, 3, w, b);
  CHECK(res.degenerate_boxes == 1);
  CHECK(res.z_r(0, 0) == 0.0);
  CHECK(res.z_r(1, 0) == doctest::Approx(9.0 * 0.9));
}

TEST_CASE("Z_b and Z_r stay slot-aligned under box permutation") {
  Rng rng(21);
  Tensor f = Tensor::zeros({8, 16, 3});
  for (Index i = 0; i < f.size(); ++i) f.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(0.0, 1.0);
  const Index dp = 6, roi = 3;
  Index flat = roi * roi * 3;
  Tensor wb = Tensor::zeros({11, dp});
  Tensor bb = Tensor::zeros({dp});
  Tensor wr = Tensor::zeros({flat, dp});
  Tensor br = Tensor::zeros({dp});
  for (Index i = 0; i < wb.size(); ++i) wb.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);
  for (Index i = 0; i < wr.size(); ++i) wr.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);

  std::vector<DetectionBox> boxes;
  for (int i = 0; i < 5; ++i) boxes.push_back(random_box(rng));
  std::vector<std::size_t> perm = {3, 1, 4, 0, 2};
  std::vector<DetectionBox> permuted;
  for (std::size_t p : perm) permuted.push_back(boxes[p]);

  Tensor zb = bbox_embeddings(boxes, wb, bb);
  Tensor zb_p = bbox_embeddings(permuted, wb, bb);
  auto zr = roi_embeddings(f, boxes, 128.0, 64.0, 1.0 / 8.0, roi, wr, br);
  auto zr_p = roi_embeddings(f, permuted, 128.0, 64.0, 1.0 / 8.0, roi, wr, br);
  // GEMM row blocking means a permuted batch is equal to the last bit or so,
  // not bitwise; 1e-12 is far below any tolerance the pipeline relies on.
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (Index j = 0; j < dp; ++j) {
      CHECK(std::abs(zb_p(static_cast<Index>(i), j) -
                     zb(static_cast<Index>(perm[i]), j)) < 1e-12);
      CHECK(std::abs(zr_p.z_r(static_cast<Index>(i), j) -
                     zr.z_r(static_cast<Index>(perm[i]), j)) < 1e-12);
    }
  }
}

TEST_CASE("detection files round-trip and reject malformed records") {
  std::map<std::string, std::vector<DetectionBox>> frames;
  Rng rng(31);
  for (int f = 0; f < 3; ++f) {
    std::string id = "frame_" + std::to_string(f);
    for (int i = 0; i <= f; ++i) frames[id].push_back(random_box(rng));
  }
  std::string text = emit_detections(frames);
  auto parsed = parse_detections(text);
  REQUIRE(parsed.size() == frames.size());
  for (const auto& [id, boxes] : frames) {
    REQUIRE(parsed.count(id) == 1);
    REQUIRE(parsed[id].size() == boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      CHECK(parsed[id][i].x1 == doctest::Approx(boxes[i].x1).epsilon(1e-7));
      CHECK(parsed[id][i].score == doctest::Approx(boxes[i].score).epsilon(1e-7));
      CHECK(parsed[id][i].category == boxes[i].category);
    }
  }

  // Category accepted by index as well as by name.
  auto by_index = parse_detections("f 0.1 0.1 0.5 0.5 0.9 3\n");
  CHECK(by_index["f"][0].category == Category::car);

  auto expect_error_line = [](const std::string& text, long line) {
    try {
      parse_detections(text);
      FAIL("expected ParseError for: " << text);
    } catch (const ParseError& e) {
      CHECK(e.line() == line);
    }
  };
  expect_error_line("f 0.1 0.1 0.5\n", 1);
  expect_error_line("f 0.1 0.1 0.5 0.5 0.9 car extra\n", 1);
  expect_error_line("f 0.1 0.1 0.5 0.5 0.9 spaceship\n", 1);
  expect_error_line("f 0.5 0.1 0.1 0.5 0.9 car\n", 1);   // inverted corners
  expect_error_line("f 0.1 0.1 0.5 0.5 1.5 car\n", 1);   // score out of range
  expect_error_line("f 0.1 0.1 0.5 0.5 0.9 car\ng 1 2\n", 2);
}
