#include "laneformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace laneformer {

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double eps) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  // Analytic pass: one forward + reverse replay.
  {
    GradTape tape;
    Tensor loss = fn(inputs);
    if (loss.size() != 1) {
      throw Error("grad_check: fn must return a scalar, got shape " +
                  shape_to_string(loss.shape()));
    }
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    auto g = t.ensure_grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  // Numeric pass: central differences, no tape.
  auto eval = [&]() {
    std::vector<Tensor> detached;
    detached.reserve(inputs.size());
    for (const Tensor& t : inputs) {
      detached.push_back(Tensor::from_values(
          t.shape(), std::vector<double>(t.values().begin(), t.values().end())));
    }
    return fn(detached).item();
  };

  GradCheckResult result;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    auto vals = t.values_mut();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      double saved = vals[k];
      vals[k] = saved + eps;
      double up = eval();
      vals[k] = saved - eps;
      double down = eval();
      vals[k] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[ti][k];
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = static_cast<Index>(ti);
        result.worst_index = static_cast<Index>(k);
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace laneformer
