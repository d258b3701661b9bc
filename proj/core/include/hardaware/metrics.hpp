#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "hardaware/tensor.hpp"

namespace hardaware {

/// Partition of attributes into named groups.
struct GroupMap {
  std::vector<std::size_t> group_of;  // attribute -> group
  std::vector<std::string> names;

  /// Every attribute in one group named "all".
  static GroupMap single(std::size_t attributes);
  std::size_t groups() const { return names.size(); }
  /// Throws ConfigError on a group id without a name or a mismatched width.
  void validate(std::size_t attributes) const;
};

struct RecallReport {
  std::vector<double> per_group;  // NaN for a group with no evaluated image
  double overall = 0.0;           // pooled over groups
};

/// Micro top-k recall within each group: sum_i |topk_i(g) & pos_i(g)| over
/// sum_i |pos_i(g)|; images without positives in g are skipped for g. With
/// `capped` the denominator per image is min(k, |pos_i(g)|). Ranking ties go
/// to the lower attribute index.
RecallReport topk_recall(const Tensor& scores, const Tensor& labels, std::size_t k, const GroupMap& groups,
                         bool capped = false);

/// Fraction of samples whose class is among the k highest scores.
double topk_accuracy(const Tensor& scores, const std::vector<int>& labels, std::size_t k);

struct BalancedAccuracyReport {
  std::vector<double> per_attribute;   // NaN when excluded
  std::vector<std::size_t> excluded;   // attributes lacking positives or negatives
  std::vector<double> per_group;       // NaN for a group with no included attribute
  double overall = 0.0;                // mean over included attributes
};

/// Per attribute 0.5 * (TP/P + TN/N) with prediction sigma(logit) >= threshold.
BalancedAccuracyReport class_balanced_accuracy(const Tensor& logits, const Tensor& labels, const GroupMap& groups,
                                               double threshold = 0.5);

struct GaussianSummary {
  std::vector<double> mean;
  std::vector<double> covariance;  // d x d row-major, unbiased
  std::size_t count = 0;

  std::size_t dim() const { return mean.size(); }
  /// Fit to the rows of a [n x d] feature matrix.
  static GaussianSummary fit(const Tensor& features);
};

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with
/// symmetric square roots from eigendecompositions and negative eigenvalues
/// clipped to zero.
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

struct ErrorCountRow {
  std::size_t attribute;
  std::size_t positives;
  double mean_probability;
};

struct ErrorCountTable {
  std::vector<ErrorCountRow> rows;
  std::vector<std::size_t> omitted;  // attributes without positives

  /// attribute_id,positive_count,mean_positive_probability; omitted ids in a
  /// trailing comment line.
  void write_csv(const std::filesystem::path& path) const;
};

/// Mean sigma(logit) over the positive samples of each attribute.
ErrorCountTable error_vs_count_table(const Tensor& logits, const Tensor& labels);

/// Pearson correlation; NaN when either input is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace hardaware
