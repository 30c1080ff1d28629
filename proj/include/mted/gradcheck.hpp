#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mted/tensor.hpp"

namespace mted {

class Rng;

struct GradCheckOptions {
  double step = 1e-5;
  // At most this many elements of each tensor are probed (all if <= 0).
  int max_elements_per_tensor = 0;
  uint64_t seed = 1;
};

struct GradCheckResult {
  // max |analytic - numeric| / max |numeric| taken per checked tensor, then
  // maximised over tensors.
  double worst_relative_error = 0.0;
  std::string worst_tensor;
  int elements_checked = 0;
};

// Compares analytic gradients of the scalar produced by `loss` against central
// finite differences for every tensor in `wrt` (named by `names`). The loss is
// re-evaluated with each probed element perturbed in place; all tensors must be
// 64-bit for meaningful tolerances.
GradCheckResult check_gradients(const std::function<Tensor()>& loss,
                                const std::vector<Tensor>& wrt,
                                const std::vector<std::string>& names,
                                const GradCheckOptions& options = {});

}  // namespace mted
