// Bipartite matching between padded ground truth and predictions, the
// pairwise cost, and the set-prediction training loss.
#pragma once

#include "laneformer/lane.hpp"
#include "laneformer/tensor.hpp"

#include <vector>

namespace laneformer {

/// One decoder query's output: a two-class distribution over
/// {non-lane, lane} plus the lane geometry regression. All four tensors stay
/// connected to the graph that produced them, so the loss is differentiable
/// through them.
struct LanePrediction {
  Tensor class_probs;  // {2}: [p(non-lane), p(lane)], nonnegative, sums to 1
  Tensor xs;           // {kGridRows} normalized x per grid row
  Tensor s;            // {1} normalized span start
  Tensor e;            // {1} normalized span end
};

/// Throws Error unless class_probs is a valid 2-way distribution (within
/// 1e-6) and the geometry tensors have their fixed shapes.
void validate_prediction(const LanePrediction& p);

/// Loss weights (omega_1..omega_4): classification, x-coordinates, span
/// start, span end.
struct MatchWeights {
  double w1 = 2.0;
  double w2 = 10.0;
  double w3 = 10.0;
  double w4 = 10.0;
};

/// Square cost matrix D(ground-truth slot n, prediction m).
struct CostMatrix {
  Index n = 0;
  std::vector<double> values;  // row-major n*n

  double at(Index row, Index col) const {
    return values[static_cast<std::size_t>(row * n + col)];
  }
  double& at(Index row, Index col) {
    return values[static_cast<std::size_t>(row * n + col)];
  }
};

struct MatchAssignment {
  std::vector<Index> sigma;  // slot n is matched to prediction sigma[n]
  double total_cost = 0.0;   // sum over n of cost.at(n, sigma[n])
};

/// Location cost between a real lane and a prediction: w2 * mean absolute x
/// error over the lane's valid rows + w3 * |s - s_hat| + w4 * |e - e_hat|.
/// Plain scalar arithmetic — never recorded on the tape (matching is frozen
/// during backprop). Throws Error when the lane covers zero grid rows.
double location_cost(const Lane& g, const LanePrediction& p, double w2,
                     double w3, double w4);

/// D(n, m) = -w1 * p_m(c_n) + [c_n == 1] * location_cost(g_n, p_m).
/// Requires |gt| == |preds|.
CostMatrix pairwise_cost(const std::vector<GroundTruthSlot>& gt,
                         const std::vector<LanePrediction>& preds,
                         const MatchWeights& w);

/// Exact minimum-cost assignment (O(n^3) shortest-augmenting-path), with
/// ties broken toward the lexicographically smallest sigma. Throws Error on
/// non-finite entries.
MatchAssignment hungarian(const CostMatrix& cost);

/// Differentiable training loss under a fixed assignment:
///   sum_n  -w1 * log p_{sigma(n)}(c_n) + [c_n == 1] * location_cost
/// with probabilities clamped to >= 1e-12 inside the log. sigma is data, not
/// a differentiable quantity. Returns a {1} tensor.
Tensor total_loss(const std::vector<GroundTruthSlot>& gt,
                  const std::vector<LanePrediction>& preds,
                  const std::vector<Index>& sigma, const MatchWeights& w);

}  // namespace laneformer
