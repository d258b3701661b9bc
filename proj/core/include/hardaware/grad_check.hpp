#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "hardaware/graph.hpp"

namespace hardaware {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative deviation |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// When nonzero, only this many randomly chosen entries per parameter are probed.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Builds a scalar loss on the given graph. Must bind parameters through
/// Graph::param and be deterministic across calls.
using ScalarBuilder = std::function<Var(Graph&)>;

/// Compares reverse-mode gradients of `build` against central differences.
/// Parameter values are restored before returning. Throws NumericError when
/// the loss is not finite.
GradCheckReport grad_check(const ScalarBuilder& build, std::span<Parameter* const> params,
                           const GradCheckOptions& options = {});

}  // namespace hardaware
