#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hardaware/grad_check.hpp"

namespace hardaware {

struct GradCheckCaseResult {
  std::string name;
  std::uint64_t seed = 0;
  double tolerance = 0.0;
  GradCheckReport report;
};

/// Names of every differentiable operation and composite loss in the suite.
std::vector<std::string> gradcheck_case_names();

/// Runs every case whose name contains `filter` for seeds 0..seeds-1.
/// Tolerance is 1e-4, or 1e-3 for batch normalization.
std::vector<GradCheckCaseResult> run_gradcheck_suite(std::size_t seeds = 5, const std::string& filter = "");

}  // namespace hardaware
