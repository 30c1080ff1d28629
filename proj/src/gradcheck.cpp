#include "mted/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mted/error.hpp"
#include "mted/rng.hpp"

namespace mted {

GradCheckResult check_gradients(const std::function<Tensor()>& loss,
                                const std::vector<Tensor>& wrt,
                                const std::vector<std::string>& names,
                                const GradCheckOptions& options) {
  if (names.size() != wrt.size()) throw UsageError("check_gradients: names/wrt size mismatch");
  std::vector<Tensor> targets = wrt;
  for (Tensor& t : targets) t.zero_grad();
  loss().backward();

  GradCheckResult result;
  Rng rng(options.seed);
  for (size_t ti = 0; ti < targets.size(); ++ti) {
    Tensor& t = targets[ti];
    const Tensor analytic = t.grad();
    std::vector<int64_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_elements_per_tensor > 0 &&
        static_cast<int64_t>(idx.size()) > options.max_elements_per_tensor) {
      for (int64_t i = 0; i < options.max_elements_per_tensor; ++i) {
        std::swap(idx[i], idx[rng.integer(i, static_cast<int64_t>(idx.size()) - 1)]);
      }
      idx.resize(options.max_elements_per_tensor);
    }
    double max_diff = 0.0, max_numeric = 0.0;
    {
      NoGradGuard no_grad;
      for (int64_t i : idx) {
        const double orig = t.at(i);
        t.set(i, orig + options.step);
        const double up = loss().item();
        t.set(i, orig - options.step);
        const double down = loss().item();
        t.set(i, orig);
        const double numeric = (up - down) / (2.0 * options.step);
        max_diff = std::max(max_diff, std::abs(numeric - analytic.at(i)));
        max_numeric = std::max(max_numeric, std::abs(numeric));
        ++result.elements_checked;
      }
    }
    const double rel = max_diff / std::max(max_numeric, 1e-12);
    if (result.worst_tensor.empty() || rel > result.worst_relative_error) {
      result.worst_relative_error = rel;
      result.worst_tensor = names[ti];
    }
  }
  for (Tensor& t : targets) t.zero_grad();
  return result;
}

}  // namespace mted
