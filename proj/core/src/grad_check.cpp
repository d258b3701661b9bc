#include "hardaware/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hardaware/errors.hpp"

namespace hardaware {

namespace {

double evaluate(const ScalarBuilder& build) {
  Graph g(/*record=*/false);
  const double v = build(g).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite (" + std::to_string(v) + ")");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarBuilder& build, std::span<Parameter* const> params,
                           const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = build(g);
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("grad_check: loss is not finite (" + std::to_string(loss.value().item()) + ")");
    }
    g.backward(loss);
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (Parameter* p : params) {
    std::vector<std::size_t> entries(p->value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_param && entries.size() > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    for (std::size_t i : entries) {
      const double original = p->value[i];
      p->value[i] = original + options.epsilon;
      const double plus = evaluate(build);
      p->value[i] = original - options.epsilon;
      const double minus = evaluate(build);
      p->value[i] = original;

      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.entries_checked;
      if (report.entries_checked == 1 || rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace hardaware
