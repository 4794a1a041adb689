#include "laneformer/matching.hpp"

#include "laneformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace laneformer {

namespace {

double prob_of_class(const LanePrediction& p, int c) {
  return p.class_probs.at(c);
}

/// Kuhn augmenting path over an adjacency list; returns true if `row` can be
/// matched given the current column owners.
bool try_assign(Index row, const std::vector<std::vector<Index>>& adj,
                std::vector<char>& visited, std::vector<Index>& owner) {
  for (Index col : adj[static_cast<std::size_t>(row)]) {
    if (visited[static_cast<std::size_t>(col)]) continue;
    visited[static_cast<std::size_t>(col)] = 1;
    Index current = owner[static_cast<std::size_t>(col)];
    if (current < 0 || try_assign(current, adj, visited, owner)) {
      owner[static_cast<std::size_t>(col)] = row;
      return true;
    }
  }
  return false;
}

/// True if rows `first_free..n-1` can all be matched in `adj`, given columns
/// already taken by earlier rows (owner[col] = -2 marks them reserved).
bool remainder_matchable(Index first_free, Index n,
                         const std::vector<std::vector<Index>>& adj,
                         const std::vector<Index>& taken_cols) {
  std::vector<Index> owner(static_cast<std::size_t>(n), -1);
  for (Index col : taken_cols) owner[static_cast<std::size_t>(col)] = -2;
  // -2 never augments: give reserved columns a self-loop-free sentinel by
  // filtering them in try_assign via visited.
  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  for (Index row = first_free; row < n; ++row) {
    std::fill(visited.begin(), visited.end(), 0);
    for (Index col : taken_cols) visited[static_cast<std::size_t>(col)] = 1;
    if (!try_assign(row, adj, visited, owner)) return false;
  }
  return true;
}

double assignment_total(const CostMatrix& cost, const std::vector<Index>& sigma) {
  double total = 0.0;
  for (Index n = 0; n < cost.n; ++n) total += cost.at(n, sigma[static_cast<std::size_t>(n)]);
  return total;
}

/// Shortest-augmenting-path assignment with dual potentials u, v. Exact for
/// exactly-representable inputs (integers): every update is a subtraction of
/// existing values.
std::vector<Index> solve_jv(const CostMatrix& cost, std::vector<double>& u,
                            std::vector<double>& v) {
  const Index n = cost.n;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based with a virtual column 0, the classic formulation.
  u.assign(static_cast<std::size_t>(n) + 1, 0.0);
  v.assign(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<Index> p(static_cast<std::size_t>(n) + 1, 0);  // column -> row
  std::vector<Index> way(static_cast<std::size_t>(n) + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      Index i0 = p[static_cast<std::size_t>(j0)];
      Index j1 = 0;
      double delta = kInf;
      for (Index j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        double cur = cost.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                     v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> sigma(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= n; ++j) {
    sigma[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return sigma;
}

}  // namespace

void validate_prediction(const LanePrediction& p) {
  if (!p.class_probs.defined() || p.class_probs.size() != 2) {
    throw Error("LanePrediction.class_probs must hold exactly 2 values");
  }
  double p0 = p.class_probs.at(0), p1 = p.class_probs.at(1);
  if (p0 < 0.0 || p1 < 0.0 || std::abs(p0 + p1 - 1.0) > 1e-6) {
    throw Error("LanePrediction.class_probs is not a distribution: [" +
                std::to_string(p0) + ", " + std::to_string(p1) + "]");
  }
  if (!p.xs.defined() || p.xs.size() != kGridRows) {
    throw Error("LanePrediction.xs must hold " + std::to_string(kGridRows) +
                " values");
  }
  if (!p.s.defined() || p.s.size() != 1 || !p.e.defined() || p.e.size() != 1) {
    throw Error("LanePrediction.s and .e must be scalars");
  }
}

double location_cost(const Lane& g, const LanePrediction& p, double w2,
                     double w3, double w4) {
  double abs_sum = 0.0;
  Index valid = 0;
  for (Index row = 0; row < kGridRows; ++row) {
    if (!g.row_valid(row)) continue;
    abs_sum += std::abs(g.xs[static_cast<std::size_t>(row)] - p.xs.at(row));
    ++valid;
  }
  if (valid == 0) {
    throw Error("location_cost: ground-truth lane covers zero grid rows");
  }
  return w2 * (abs_sum / static_cast<double>(valid)) +
         w3 * std::abs(g.s - p.s.at(0)) + w4 * std::abs(g.e - p.e.at(0));
}

CostMatrix pairwise_cost(const std::vector<GroundTruthSlot>& gt,
                         const std::vector<LanePrediction>& preds,
                         const MatchWeights& w) {
  if (gt.size() != preds.size()) {
    throw Error("pairwise_cost: " + std::to_string(gt.size()) +
                " ground-truth slots vs " + std::to_string(preds.size()) +
                " predictions");
  }
  for (const auto& p : preds) validate_prediction(p);
  CostMatrix cost;
  cost.n = static_cast<Index>(gt.size());
  cost.values.resize(static_cast<std::size_t>(cost.n * cost.n));
  for (Index n = 0; n < cost.n; ++n) {
    const GroundTruthSlot& slot = gt[static_cast<std::size_t>(n)];
    for (Index m = 0; m < cost.n; ++m) {
      const LanePrediction& p = preds[static_cast<std::size_t>(m)];
      double d = -w.w1 * prob_of_class(p, slot.c);
      if (slot.c == 1) d += location_cost(slot.lane, p, w.w2, w.w3, w.w4);
      cost.at(n, m) = d;
    }
  }
  return cost;
}

MatchAssignment hungarian(const CostMatrix& cost) {
  const Index n = cost.n;
  if (n <= 0) throw Error("hungarian: empty cost matrix");
  if (static_cast<Index>(cost.values.size()) != n * n) {
    throw Error("hungarian: cost matrix is not square");
  }
  double max_abs = 0.0;
  for (Index i = 0; i < n * n; ++i) {
    double vi = cost.values[static_cast<std::size_t>(i)];
    if (!std::isfinite(vi)) {
      throw Error("hungarian: non-finite cost at (" + std::to_string(i / n) +
                  ", " + std::to_string(i % n) + ")");
    }
    max_abs = std::max(max_abs, std::abs(vi));
  }

  std::vector<double> u, v;
  std::vector<Index> jv = solve_jv(cost, u, v);

  // Optimal edges satisfy c(i,j) = u(i+1) + v(j+1) (complementary
  // slackness); the tolerance absorbs rounding on non-integer inputs. The
  // lexicographically smallest perfect matching inside that edge set is the
  // canonical tie-break.
  const double eps = 1e-12 * (1.0 + max_abs);
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
  bool forced = true;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      double reduced = cost.at(i, j) - u[static_cast<std::size_t>(i) + 1] -
                       v[static_cast<std::size_t>(j) + 1];
      if (std::abs(reduced) <= eps) adj[static_cast<std::size_t>(i)].push_back(j);
    }
    if (adj[static_cast<std::size_t>(i)].size() != 1) forced = false;
  }

  MatchAssignment result;
  result.sigma = jv;
  result.total_cost = assignment_total(cost, jv);
  if (forced) return result;  // unique tight edge per row: nothing to break

  std::vector<Index> taken;
  std::vector<Index> lex(static_cast<std::size_t>(n), -1);
  bool feasible = true;
  for (Index i = 0; i < n && feasible; ++i) {
    feasible = false;
    for (Index j : adj[static_cast<std::size_t>(i)]) {
      if (std::find(taken.begin(), taken.end(), j) != taken.end()) continue;
      taken.push_back(j);
      if (remainder_matchable(i + 1, n, adj, taken)) {
        lex[static_cast<std::size_t>(i)] = j;
        feasible = true;
        break;
      }
      taken.pop_back();
    }
  }
  if (feasible) {
    double lex_total = assignment_total(cost, lex);
    // Guard against an over-wide tolerance: only accept the refinement when
    // it is genuinely no worse than the certified optimum.
    if (lex_total <= result.total_cost) {
      result.sigma = std::move(lex);
      result.total_cost = lex_total;
    }
  }
  return result;
}

Tensor total_loss(const std::vector<GroundTruthSlot>& gt,
                  const std::vector<LanePrediction>& preds,
                  const std::vector<Index>& sigma, const MatchWeights& w) {
  if (gt.size() != preds.size() || sigma.size() != gt.size()) {
    throw Error("total_loss: slot/prediction/assignment sizes disagree");
  }
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t n = 0; n < gt.size(); ++n) {
    const GroundTruthSlot& slot = gt[n];
    if (sigma[n] < 0 || sigma[n] >= static_cast<Index>(preds.size())) {
      throw Error("total_loss: assignment index " + std::to_string(sigma[n]) +
                  " out of range");
    }
    const LanePrediction& p = preds[static_cast<std::size_t>(sigma[n])];
    validate_prediction(p);

    Tensor probs = reshape(p.class_probs, {1, 2});
    Tensor p_c = slice_cols(probs, slot.c, 1);
    loss = add(loss, scale(sum_all(log_clamped(p_c)), -w.w1));

    if (slot.c != 1) continue;
    std::vector<Index> rows;
    std::vector<double> targets;
    for (Index row = 0; row < kGridRows; ++row) {
      if (!slot.lane.row_valid(row)) continue;
      rows.push_back(row);
      targets.push_back(slot.lane.xs[static_cast<std::size_t>(row)]);
    }
    if (rows.empty()) {
      throw Error("total_loss: ground-truth lane covers zero grid rows");
    }
    Index valid = static_cast<Index>(rows.size());
    Tensor xhat = gather_rows(reshape(p.xs, {kGridRows, 1}), rows);
    Tensor xref = Tensor::from_values({valid, 1}, std::move(targets));
    Tensor l1x = sum_all(absolute(sub(xhat, xref)));
    loss = add(loss, scale(l1x, w.w2 / static_cast<double>(valid)));
    loss = add(loss, scale(absolute(sub(p.s, Tensor::scalar(slot.lane.s))), w.w3));
    loss = add(loss, scale(absolute(sub(p.e, Tensor::scalar(slot.lane.e))), w.w4));
  }
  return loss;
}

}  // namespace laneformer
