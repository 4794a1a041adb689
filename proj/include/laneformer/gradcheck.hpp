// Finite-difference verification of reverse-mode gradients.
#pragma once

#include "laneformer/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace laneformer {

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst |analytic - numeric| / max(1, |analytic|, |numeric|)
  Index worst_input = -1;      // which input tensor
  Index worst_index = -1;      // flat element index within it
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the tape gradient of `fn` (which must return a scalar tensor built
// from `inputs` under the active tape) against central differences with step
// `eps` on every element of every input.  `fn` is re-run 2*size times, so keep
// the inputs small.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double eps = 1e-6);

}  // namespace laneformer
