#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "laneformer/matching.hpp"
#include "laneformer/ops.hpp"
#include "laneformer/gradcheck.hpp"
#include "laneformer/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

using namespace laneformer;

namespace {

Lane make_lane(double x0, double slope, double s, double e) {
  Lane l;
  l.s = s;
  l.e = e;
  for (Index i = 0; i < kGridRows; ++i) {
    l.xs[static_cast<std::size_t>(i)] =
        l.row_valid(i) ? x0 + slope * grid_y(i) : 0.0;
  }
  return l;
}

LanePrediction from_lane(const Lane& l, double p_lane) {
  LanePrediction p;
  p.class_probs = Tensor::from_values({2}, {1.0 - p_lane, p_lane});
  std::vector<double> xs(l.xs.begin(), l.xs.end());
  p.xs = Tensor::from_values({kGridRows}, std::move(xs));
  p.s = Tensor::scalar(l.s);
  p.e = Tensor::scalar(l.e);
  return p;
}

LanePrediction random_prediction(Rng& rng) {
  LanePrediction p;
  double a = rng.uniform(0.05, 0.95);
  p.class_probs = Tensor::from_values({2}, {a, 1.0 - a});
  std::vector<double> xs(kGridRows);
  for (double& x : xs) x = rng.uniform(0.0, 1.0);
  p.xs = Tensor::from_values({kGridRows}, std::move(xs));
  p.s = Tensor::scalar(rng.uniform(0.0, 0.5));
  p.e = Tensor::scalar(rng.uniform(0.5, 1.0));
  return p;
}

// Exhaustive assignment oracle: lexicographic enumeration, strict improvement
// only, so ties resolve to the lexicographically smallest permutation.
MatchAssignment brute_force(const CostMatrix& cost) {
  std::vector<Index> perm(static_cast<std::size_t>(cost.n));
  std::iota(perm.begin(), perm.end(), Index{0});
  MatchAssignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Index n = 0; n < cost.n; ++n) total += cost.at(n, perm[static_cast<std::size_t>(n)]);
    if (total < best.total_cost) {
      best.total_cost = total;
      best.sigma = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

CostMatrix matrix_from(std::vector<std::vector<double>> rows) {
  CostMatrix c;
  c.n = static_cast<Index>(rows.size());
  for (const auto& r : rows)
    for (double v : r) c.values.push_back(v);
  return c;
}

}  // namespace

TEST_CASE("location_cost fixed points") {
  Lane g = make_lane(0.4, 0.1, 0.2, 0.9);
  REQUIRE(g.valid_rows() > 10);

  // Exact prediction: zero cost.
  CHECK(location_cost(g, from_lane(g, 1.0), 10, 10, 10) == 0.0);

  // Constant +0.1 x offset, exact span, w2 = 10 -> 10 * 0.1 = 1.
  Lane off = g;
  for (Index i = 0; i < kGridRows; ++i)
    if (g.row_valid(i)) off.xs[static_cast<std::size_t>(i)] += 0.1;
  CHECK(location_cost(g, from_lane(off, 1.0), 10, 10, 10) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // Zero valid rows: error. A span strictly between two grid rows.
  Lane empty;
  empty.s = grid_y(3) + 0.002;
  empty.e = grid_y(4) - 0.002;
  REQUIRE(empty.valid_rows() == 0);
  CHECK_THROWS_AS(location_cost(empty, from_lane(g, 1.0), 10, 10, 10), Error);
}

TEST_CASE("location_cost equals an independent scalar oracle") {
  Rng rng(81);
  for (int trial = 0; trial < 50; ++trial) {
    Lane g = make_lane(rng.uniform(0.2, 0.8), rng.uniform(-0.3, 0.3),
                       rng.uniform(0.0, 0.4), rng.uniform(0.6, 1.0));
    LanePrediction p = random_prediction(rng);
    double expect_abs = 0.0;
    int count = 0;
    for (Index i = 0; i < kGridRows; ++i) {
      double y = grid_y(i);
      if (y < g.s - 1e-6 || y > g.e + 1e-6) continue;
      expect_abs += std::abs(g.xs[static_cast<std::size_t>(i)] - p.xs.at(i));
      ++count;
    }
    double expect = 10.0 * expect_abs / count +
                    10.0 * std::abs(g.s - p.s.item()) +
                    10.0 * std::abs(g.e - p.e.item());
    CHECK(location_cost(g, p, 10, 10, 10) ==
          doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("pairwise_cost implements the gated cost") {
  MatchWeights w;  // (2, 10, 10, 10)
  Lane lane = make_lane(0.5, 0.0, 0.1, 0.9);
  std::vector<GroundTruthSlot> gt(2);
  gt[0].c = 1;
  gt[0].lane = lane;
  gt[1].c = 0;  // non-lane padding

  Rng rng(82);
  std::vector<LanePrediction> preds;
  preds.push_back(from_lane(lane, 1.0));  // perfect lane prediction
  preds.push_back(random_prediction(rng));

  CostMatrix cost = pairwise_cost(gt, preds, w);
  REQUIRE(cost.n == 2);

  // Perfect lane with p(lane) = 1: D = -w1.
  CHECK(cost.at(0, 0) == doctest::Approx(-2.0).epsilon(1e-12));
  // Non-lane slot: no location term, D = -w1 * p(non-lane).
  CHECK(cost.at(1, 0) == doctest::Approx(-2.0 * preds[0].class_probs.at(0)));
  CHECK(cost.at(1, 1) == doctest::Approx(-2.0 * preds[1].class_probs.at(0)));
  // Lane slot vs arbitrary prediction: direct formula evaluation.
  double expect = -2.0 * preds[1].class_probs.at(1) +
                  location_cost(lane, preds[1], 10, 10, 10);
  CHECK(cost.at(0, 1) == doctest::Approx(expect).epsilon(1e-12));

  // Mismatched sizes rejected.
  CHECK_THROWS_AS(pairwise_cost(gt, {preds[0]}, w), Error);
}

TEST_CASE("hungarian fixed points and tie-breaks") {
  auto identity_pref = hungarian(matrix_from({{0, 9}, {9, 0}}));
  CHECK(identity_pref.sigma == std::vector<Index>{0, 1});
  CHECK(identity_pref.total_cost == 0.0);

  // Constant matrix: everything ties; the tie-break picks the identity.
  auto constant = hungarian(matrix_from({{3, 3, 3}, {3, 3, 3}, {3, 3, 3}}));
  CHECK(constant.sigma == std::vector<Index>{0, 1, 2});
  CHECK(constant.total_cost == 9.0);

  // A tie needing a non-greedy lexicographic choice: rows 0 and 1 both
  // prefer column 0 or cost-equal alternatives.
  auto tie = hungarian(matrix_from({{1, 1, 5}, {1, 5, 1}, {5, 1, 1}}));
  CHECK(tie.sigma == std::vector<Index>{0, 2, 1});
  CHECK(tie.total_cost == 3.0);

  CHECK_THROWS_AS(
      hungarian(matrix_from({{0.0, std::numeric_limits<double>::quiet_NaN()},
                             {1.0, 2.0}})),
      Error);
}

TEST_CASE("hungarian equals brute force on random matrices") {
  Rng rng(83);
  for (Index n = 2; n <= 7; ++n) {
    for (int trial = 0; trial < 300; ++trial) {
      CostMatrix cost;
      cost.n = n;
      cost.values.resize(static_cast<std::size_t>(n * n));
      bool integers = trial % 3 == 0;  // integer matrices exercise exact ties
      for (double& v : cost.values) {
        v = integers ? static_cast<double>(rng.uniform_int(0, 6))
                     : rng.uniform(-5.0, 5.0);
      }
      auto got = hungarian(cost);
      auto expect = brute_force(cost);
      CHECK(got.total_cost == expect.total_cost);
      CHECK(got.sigma == expect.sigma);
    }
  }
}

TEST_CASE("argmin is invariant to row and column constant shifts") {
  Rng rng(84);
  for (int trial = 0; trial < 50; ++trial) {
    CostMatrix cost;
    cost.n = 5;
    cost.values.resize(25);
    for (double& v : cost.values) v = static_cast<double>(rng.uniform_int(0, 20));
    auto base = hungarian(cost);

    CostMatrix shifted = cost;
    Index row = rng.uniform_int(0, 4), col = rng.uniform_int(0, 4);
    double row_delta = static_cast<double>(rng.uniform_int(1, 9));
    double col_delta = static_cast<double>(rng.uniform_int(1, 9));
    for (Index j = 0; j < 5; ++j) shifted.at(row, j) += row_delta;
    for (Index i = 0; i < 5; ++i) shifted.at(i, col) += col_delta;
    auto moved = hungarian(shifted);
    CHECK(moved.sigma == base.sigma);
    CHECK(moved.total_cost ==
          doctest::Approx(base.total_cost + row_delta + col_delta));
  }
}

TEST_CASE("total_loss fixed points") {
  MatchWeights w;
  Lane lane = make_lane(0.5, 0.05, 0.15, 0.85);

  // Perfect predictions: exactly matched geometry, one-hot probabilities.
  std::vector<GroundTruthSlot> gt(2);
  gt[0].c = 1;
  gt[0].lane = lane;
  gt[1].c = 0;
  std::vector<LanePrediction> preds;
  preds.push_back(from_lane(lane, 1.0));
  LanePrediction non_lane = from_lane(lane, 0.0);
  preds.push_back(non_lane);
  Tensor loss = total_loss(gt, preds, {0, 1}, w);
  CHECK(std::abs(loss.item()) < 1e-9);

  // Single non-lane slot at p = 0.5: loss = w1 * ln 2.
  std::vector<GroundTruthSlot> pad_only(1);
  LanePrediction half = from_lane(lane, 0.5);
  Tensor l2 = total_loss(pad_only, {half}, {0}, w);
  CHECK(l2.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // Zero probability survives thanks to the clamp.
  std::vector<GroundTruthSlot> lane_slot(1);
  lane_slot[0].c = 1;
  lane_slot[0].lane = lane;
  Tensor l3 = total_loss(lane_slot, {non_lane}, {0}, w);
  CHECK(std::isfinite(l3.item()));
  CHECK(l3.item() == doctest::Approx(-2.0 * std::log(1e-12)).epsilon(1e-6));
}

TEST_CASE("total_loss equals a scalar oracle on toy frames") {
  Rng rng(85);
  MatchWeights w;
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 3;
    std::vector<GroundTruthSlot> gt(n);
    for (Index i = 0; i < n; ++i) {
      gt[static_cast<std::size_t>(i)].c = rng.uniform() < 0.5 ? 1 : 0;
      if (gt[static_cast<std::size_t>(i)].c == 1) {
        gt[static_cast<std::size_t>(i)].lane =
            make_lane(rng.uniform(0.2, 0.8), rng.uniform(-0.2, 0.2),
                      rng.uniform(0.0, 0.4), rng.uniform(0.6, 1.0));
      }
    }
    std::vector<LanePrediction> preds;
    for (Index i = 0; i < n; ++i) preds.push_back(random_prediction(rng));

    auto assignment = hungarian(pairwise_cost(gt, preds, w));
    Tensor loss = total_loss(gt, preds, assignment.sigma, w);

    double expect = 0.0;
    for (Index i = 0; i < n; ++i) {
      const auto& slot = gt[static_cast<std::size_t>(i)];
      const auto& p = preds[static_cast<std::size_t>(assignment.sigma[static_cast<std::size_t>(i)])];
      double prob = std::max(p.class_probs.at(slot.c), 1e-12);
      expect += -w.w1 * std::log(prob);
      if (slot.c == 1) expect += location_cost(slot.lane, p, w.w2, w.w3, w.w4);
    }
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("total_loss drops as a wrong coordinate approaches its target") {
  MatchWeights w;
  Lane lane = make_lane(0.5, 0.0, 0.1, 0.9);
  std::vector<GroundTruthSlot> gt(1);
  gt[0].c = 1;
  gt[0].lane = lane;

  double prev = std::numeric_limits<double>::infinity();
  for (double offset : {0.4, 0.3, 0.2, 0.1, 0.05, 0.0}) {
    Lane moved = lane;
    Index probe = lane.first_valid_row();
    moved.xs[static_cast<std::size_t>(probe)] += offset;
    double v = total_loss(gt, {from_lane(moved, 1.0)}, {0}, w).item();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("total_loss gradients check out with the assignment frozen") {
  Rng rng(86);
  MatchWeights w;
  const Index n = 2;
  std::vector<GroundTruthSlot> gt(n);
  gt[0].c = 1;
  gt[0].lane = make_lane(0.45, 0.1, 0.2, 0.9);
  gt[1].c = 0;

  // Predictions derived from raw logits/regressions through softmax/sigmoid,
  // as the network produces them.
  Tensor logits = Tensor::from_values({n, 2}, {0.3, -0.2, -0.7, 0.4});
  Tensor raw = Tensor::zeros({n, kGridRows + 2});
  for (Index i = 0; i < raw.size(); ++i)
    raw.values_mut()[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);

  auto build_loss = [&](const std::vector<Tensor>& in) {
    Tensor probs = softmax(in[0], 1);
    Tensor reg = sigmoid(in[1]);
    std::vector<LanePrediction> preds;
    for (Index q = 0; q < n; ++q) {
      LanePrediction p;
      p.class_probs = reshape(gather_rows(probs, {q}), {2});
      Tensor row = gather_rows(reg, {q});
      p.xs = reshape(slice_cols(row, 0, kGridRows), {kGridRows});
      p.s = reshape(slice_cols(row, kGridRows, 1), {1});
      p.e = reshape(slice_cols(row, kGridRows + 1, 1), {1});
      preds.push_back(std::move(p));
    }
    // Freeze the assignment outside the differentiable region.
    std::vector<Index> sigma = {1, 0};
    return total_loss(gt, preds, sigma, w);
  };

  auto res = grad_check(build_loss, {logits, raw});
  CHECK(res.max_rel_error < 1e-5);
}
