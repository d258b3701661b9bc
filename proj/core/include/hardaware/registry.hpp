#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/tensor.hpp"

namespace hardaware {

/// Per-attribute, per-label-value moving averages of the error weight
/// |y - p|^gamma. Cell (j, v) holds the score of attribute j for label v.
class HardLabelRegistry {
 public:
  explicit HardLabelRegistry(std::size_t attributes, double gamma = 1.2, double ema = 0.5);

  std::size_t attributes() const { return attributes_; }
  double gamma() const { return gamma_; }
  double ema() const { return ema_; }

  double score(std::size_t j, int v) const;
  bool initialized(std::size_t j, int v) const;
  std::int64_t last_update(std::size_t j, int v) const;

  /// For every (j, v) present in the batch: m = mean over samples with
  /// label v of |v - p|^gamma; S <- ema*m + (1-ema)*S, or S <- m on the
  /// first observation. Cells absent from the batch are left untouched.
  /// `positive_probs` holds sigma(logit) per node, `labels` is {0,1}.
  void record_batch(const Tensor& labels, const Tensor& positive_probs, std::int64_t step);

  /// Same, from per-node error weights that were already raised to gamma.
  void record_errors(const Tensor& labels, const Tensor& error_weights, std::int64_t step);

  /// S[j][v] normalized over initialized cells; uninitialized cells get 0.
  /// A zero sum falls back to uniform over initialized cells. Throws
  /// ConfigError when no cell of value v is initialized.
  std::vector<double> sampling_pmf(int v) const;

  /// B rows, each with k distinct attributes drawn without replacement from
  /// sampling_pmf(1) and set to 1. k is truncated to the number of
  /// attributes with nonzero mass.
  Tensor sample_hard_labels(std::size_t batch, std::size_t k, std::uint64_t seed, std::uint64_t index = 0) const;

  /// Per-node scores S_j(y_ij) for a label matrix; uninitialized cells score 0.
  Tensor node_scores(const Tensor& labels) const;

  nlohmann::json snapshot() const;
  static HardLabelRegistry restore(const nlohmann::json& j);

  /// attribute_id,S_pos,S_neg,step
  void write_csv(const std::filesystem::path& path) const;

  friend bool operator==(const HardLabelRegistry&, const HardLabelRegistry&) = default;

 private:
  std::size_t attributes_;
  double gamma_;
  double ema_;
  std::vector<double> scores_;          // [N x 2]
  std::vector<std::int64_t> updated_;  // [N x 2], -1 when never written
};

}  // namespace hardaware
