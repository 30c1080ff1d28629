#pragma once

// Named finite-difference checks over every differentiable op and the full
// networks, all in 64-bit.

#include <functional>
#include <string>
#include <vector>

#include "mted/gradcheck.hpp"

namespace mted {

inline constexpr double kGradTolerance = 1e-4;
// Bilinear and deformable paths have piecewise-linear interpolation weights.
inline constexpr double kGradToleranceSampling = 1e-3;

struct GradSuiteEntry {
  std::string name;
  double tolerance = kGradTolerance;
  GradCheckResult result;
  bool passed = false;
  double seconds = 0;
};

std::vector<std::string> gradcheck_names();

// Runs the named check, or all of them when `only` is empty. Throws
// UsageError on an unknown name. `progress` sees each entry as it finishes.
std::vector<GradSuiteEntry> run_gradcheck_suite(const std::string& only = "",
                                                const std::function<void(const GradSuiteEntry&)>& progress = {});

}  // namespace mted
