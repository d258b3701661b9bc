#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hardaware/graph.hpp"

namespace hardaware {

/// Classifier outputs for one batch of M samples. Either head may be absent.
struct BatchOutput {
  Var attribute_logits;          // [M x N] raw logits, invalid when N == 0
  Tensor attribute_labels;       // [M x N] in {0, 1}
  Var category_logits;           // [M x C] raw logits, invalid when C == 0
  std::vector<int> category_labels;  // M entries in [0, C)

  std::size_t samples() const;
  std::size_t attributes() const;
  std::size_t classes() const;
  /// Number of loss nodes: M*N binary nodes plus M categorical nodes.
  std::size_t nodes() const;
  /// Throws DimensionError / LabelError on inconsistent shapes or labels.
  void validate() const;
};

/// Probabilities are kept inside [kProbFloor, 1 - kProbFloor] before any log.
inline constexpr double kProbFloor = 1e-12;

double clamp_probability(double p);

/// sigma(logit) when y = 1, 1 - sigma(logit) when y = 0.
double target_probability(double logit, double y);
/// Elementwise target_probability, clamped. [M x N] -> [M x N].
Tensor target_probabilities(const Tensor& logits, const Tensor& labels);

/// -log(P), clamped.
double ce_node_loss(double target_prob);
/// -log(P) computed from the logit through softplus.
double ce_node_loss_from_logit(double logit, double y);

/// |y - p|^gamma where p = sigma(logit) is the predicted positive probability,
/// i.e. the probability that the node is predicted wrongly.
double error_weight(double positive_prob, double y, double gamma);
/// Elementwise error weights from logits. [M x N] -> [M x N].
Tensor error_weights(const Tensor& logits, const Tensor& labels, double gamma);

/// Per-attribute positive-class weights for weighted cross entropy.
/// Variant A: w_j = log(n_neg_j / n_pos_j).
std::vector<double> ce_weights_per_attribute(const std::vector<std::size_t>& n_pos,
                                             const std::vector<std::size_t>& n_neg);
/// Variant B: one weight sum(n_neg) / sum(n_pos) for every attribute.
std::vector<double> ce_weights_global(const std::vector<std::size_t>& n_pos, const std::vector<std::size_t>& n_neg);

enum class BaseLoss { CrossEntropy, WeightedCE };

/// Base node loss: plain cross entropy, or weighted cross entropy whose
/// positive term for attribute j is scaled by `positive_weights[j]`.
struct BaseLossSpec {
  BaseLoss kind = BaseLoss::CrossEntropy;
  std::vector<double> positive_weights;
};

struct LossResult {
  Var value;
  /// All node weights vanished (a perfect batch); value is 0 and carries no gradient.
  bool degenerate = false;
};

/// Error-probability weighted mean of node losses: sum w*L / sum w.
/// The weights are constants in backward unless `differentiate_weights`.
LossResult habp_loss(const BatchOutput& batch, double gamma, const BaseLossSpec& base = {},
                     bool differentiate_weights = false);

/// Mean over nodes of w*L. Differentiates through w unless told otherwise.
LossResult focal_loss(const BatchOutput& batch, double gamma, bool differentiate_weights = true);

/// Focal loss with attribute j's nodes scaled by exp(-priors[j]), where
/// priors[j] is the attribute's positive frequency. Category nodes keep weight 1.
LossResult weighted_focal_loss(const BatchOutput& batch, double gamma, const std::vector<double>& priors,
                               bool differentiate_weights = true);

/// Mean cross entropy over the ceil(ratio * nodes) largest node losses.
/// Ties resolve toward the lower node index.
LossResult ohem_loss(const BatchOutput& batch, double ratio);

/// Mean over nodes of the (weighted) cross entropy.
LossResult weighted_ce_loss(const BatchOutput& batch, const BaseLossSpec& base);

/// Per sample (1/C) sum_i max(logit_i - T, 0)^2, averaged over the batch.
Var deact_multiclass(Var logits, double threshold);
/// Mean of logit^2 over all nodes.
Var deact_binary(Var logits);
/// sum S*logit^2 / sum S for per-node scores S (constants). A zero score
/// sum falls back to uniform weights.
Var deact_weighted(Var logits, const Tensor& node_scores);

struct LossConfig {
  double gamma = 1.2;
  double lambda = 1e-4;
  double threshold = -4.6;
  BaseLoss base = BaseLoss::CrossEntropy;
  double ohem_ratio = 1.0;
  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// base + lambda * deact; just `base` when no deactivation term is present.
Var combined_loss(Var base, std::optional<Var> deact, double lambda);

}  // namespace hardaware
