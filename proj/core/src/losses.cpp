#include "hardaware/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "hardaware/errors.hpp"
#include "hardaware/ops.hpp"

namespace hardaware {

std::size_t BatchOutput::samples() const {
  if (attribute_logits.valid()) return attribute_logits.shape()[0];
  if (category_logits.valid()) return category_logits.shape()[0];
  return 0;
}

std::size_t BatchOutput::attributes() const { return attribute_logits.valid() ? attribute_logits.shape()[1] : 0; }
std::size_t BatchOutput::classes() const { return category_logits.valid() ? category_logits.shape()[1] : 0; }
std::size_t BatchOutput::nodes() const { return samples() * attributes() + (category_logits.valid() ? samples() : 0); }

void BatchOutput::validate() const {
  if (!attribute_logits.valid() && !category_logits.valid()) throw DimensionError("batch output has no logits");
  const std::size_t m = samples();
  if (attribute_logits.valid()) {
    if (attribute_logits.shape().size() != 2) {
      throw DimensionError("attribute logits must be [M x N], got " + to_string(attribute_logits.shape()));
    }
    if (attribute_labels.shape() != attribute_logits.shape()) {
      throw DimensionError("attribute labels " + to_string(attribute_labels.shape()) + " do not match logits " +
                           to_string(attribute_logits.shape()));
    }
    for (double y : attribute_labels.data()) {
      if (y != 0.0 && y != 1.0) throw LabelError("attribute label " + std::to_string(y) + " is not 0 or 1");
    }
  }
  if (category_logits.valid()) {
    if (category_logits.shape().size() != 2 || category_logits.shape()[0] != m) {
      throw DimensionError("category logits must be [M x C] with M = " + std::to_string(m) + ", got " +
                           to_string(category_logits.shape()));
    }
    if (category_labels.size() != m) {
      throw DimensionError("expected " + std::to_string(m) + " category labels, got " +
                           std::to_string(category_labels.size()));
    }
    const int c = static_cast<int>(classes());
    for (int t : category_labels) {
      if (t < 0 || t >= c) throw LabelError("category label " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
  }
}

double clamp_probability(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

double target_probability(double logit, double y) {
  if (y == 1.0) return stable_sigmoid(logit);
  if (y == 0.0) return stable_sigmoid(-logit);
  throw LabelError("label " + std::to_string(y) + " is not 0 or 1");
}

Tensor target_probabilities(const Tensor& logits, const Tensor& labels) {
  require_same_shape(logits, labels, "target_probabilities");
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = clamp_probability(target_probability(logits[i], labels[i]));
  return p;
}

double ce_node_loss(double target_prob) { return -std::log(clamp_probability(target_prob)); }

double ce_node_loss_from_logit(double logit, double y) {
  if (y == 1.0) return softplus(-logit);
  if (y == 0.0) return softplus(logit);
  throw LabelError("label " + std::to_string(y) + " is not 0 or 1");
}

double error_weight(double positive_prob, double y, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0, got " + std::to_string(gamma));
  return std::pow(std::abs(y - positive_prob), gamma);
}

Tensor error_weights(const Tensor& logits, const Tensor& labels, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0, got " + std::to_string(gamma));
  require_same_shape(logits, labels, "error_weights");
  Tensor w(logits.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::pow(1.0 - clamp_probability(target_probability(logits[i], labels[i])), gamma);
  }
  return w;
}

std::vector<double> ce_weights_per_attribute(const std::vector<std::size_t>& n_pos,
                                             const std::vector<std::size_t>& n_neg) {
  if (n_pos.size() != n_neg.size()) throw DimensionError("positive and negative count vectors differ in length");
  std::vector<double> w(n_pos.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (n_pos[j] == 0) throw ConfigError("attribute " + std::to_string(j) + " has no positive samples");
    w[j] = std::log(static_cast<double>(n_neg[j]) / static_cast<double>(n_pos[j]));
  }
  return w;
}

std::vector<double> ce_weights_global(const std::vector<std::size_t>& n_pos, const std::vector<std::size_t>& n_neg) {
  if (n_pos.size() != n_neg.size()) throw DimensionError("positive and negative count vectors differ in length");
  const double pos = static_cast<double>(std::accumulate(n_pos.begin(), n_pos.end(), std::size_t{0}));
  const double neg = static_cast<double>(std::accumulate(n_neg.begin(), n_neg.end(), std::size_t{0}));
  if (pos == 0.0) throw ConfigError("no positive labels in the dataset");
  return std::vector<double>(n_pos.size(), neg / pos);
}

namespace {

// Per-node quantities. Binary nodes come first in row-major order, then one
// categorical node per sample.
struct NodeTerms {
  std::size_t m = 0, n = 0, c = 0;
  std::vector<double> loss;   // L_k
  std::vector<double> err;    // e_k = 1 - P_k
  std::vector<double> dloss;  // dL/dlogit, binary nodes only
  std::vector<double> derr;   // de/dlogit, binary nodes only
  std::vector<double> prob;   // softmax rows, categorical nodes only

  std::size_t size() const { return loss.size(); }
  std::size_t binary() const { return m * n; }
};

NodeTerms node_terms(const BatchOutput& batch, const BaseLossSpec& base) {
  batch.validate();
  NodeTerms t;
  t.m = batch.samples();
  t.n = batch.attributes();
  t.c = batch.classes();
  const bool weighted = base.kind == BaseLoss::WeightedCE;
  if (weighted && base.positive_weights.size() != t.n) {
    throw ConfigError("weighted cross entropy needs " + std::to_string(t.n) + " attribute weights, got " +
                      std::to_string(base.positive_weights.size()));
  }
  const std::size_t total = batch.nodes();
  t.loss.resize(total);
  t.err.resize(total);
  t.dloss.resize(t.binary());
  t.derr.resize(t.binary());
  if (t.n > 0) {
    const Tensor& z = batch.attribute_logits.value();
    const Tensor& y = batch.attribute_labels;
    for (std::size_t i = 0; i < t.m; ++i)
      for (std::size_t j = 0; j < t.n; ++j) {
        const std::size_t k = i * t.n + j;
        const double s = stable_sigmoid(z[k]);
        const double w = weighted ? base.positive_weights[j] : 1.0;
        if (y[k] == 1.0) {
          t.loss[k] = w * softplus(-z[k]);
          t.dloss[k] = w * (s - 1.0);
          t.derr[k] = -s * (1.0 - s);
        } else {
          t.loss[k] = softplus(z[k]);
          t.dloss[k] = s;
          t.derr[k] = s * (1.0 - s);
        }
        t.err[k] = 1.0 - clamp_probability(target_probability(z[k], y[k]));
      }
  }
  if (t.c > 0) {
    const Tensor& z = batch.category_logits.value();
    t.prob.resize(t.m * t.c);
    for (std::size_t i = 0; i < t.m; ++i) {
      const double* row = z.ptr() + i * t.c;
      const double mx = *std::max_element(row, row + t.c);
      double denom = 0.0;
      for (std::size_t q = 0; q < t.c; ++q) denom += std::exp(row[q] - mx);
      for (std::size_t q = 0; q < t.c; ++q) t.prob[i * t.c + q] = std::exp(row[q] - mx) / denom;
      const auto target = static_cast<std::size_t>(batch.category_labels[i]);
      const std::size_t k = t.binary() + i;
      t.loss[k] = std::log(denom) + mx - row[target];
      t.err[k] = 1.0 - clamp_probability(t.prob[i * t.c + target]);
    }
  }
  return t;
}

// Records a scalar node whose gradient with respect to the logits is
// sum_k a_k dL_k + b_k de_k.
Var record_loss(const BatchOutput& batch, const NodeTerms& t, double value, std::vector<double> a,
                std::vector<double> b, const char* op) {
  std::vector<Var> parents;
  if (t.n > 0) parents.push_back(batch.attribute_logits);
  if (t.c > 0) parents.push_back(batch.category_logits);
  Graph& g = parents.front().graph();

  Tensor attr_grad, cat_grad;
  if (t.n > 0) {
    attr_grad = Tensor({t.m, t.n}, 0.0);
    for (std::size_t k = 0; k < t.binary(); ++k) attr_grad[k] = a[k] * t.dloss[k] + (b.empty() ? 0.0 : b[k] * t.derr[k]);
  }
  if (t.c > 0) {
    cat_grad = Tensor({t.m, t.c}, 0.0);
    for (std::size_t i = 0; i < t.m; ++i) {
      const std::size_t k = t.binary() + i;
      const auto target = static_cast<std::size_t>(batch.category_labels[i]);
      const double pt = t.prob[i * t.c + target];
      for (std::size_t q = 0; q < t.c; ++q) {
        const double p = t.prob[i * t.c + q];
        const double onehot = q == target ? 1.0 : 0.0;
        // dL/dz = p - onehot; de/dz = -p_t (onehot - p)
        double gq = a[k] * (p - onehot);
        if (!b.empty()) gq += b[k] * (-pt * (onehot - p));
        cat_grad[i * t.c + q] = gq;
      }
    }
  }
  const std::uint32_t attr_id = t.n > 0 ? batch.attribute_logits.id() : 0;
  const std::uint32_t cat_id = t.c > 0 ? batch.category_logits.id() : 0;
  const bool has_attr = t.n > 0, has_cat = t.c > 0;
  return g.record(op, Tensor::scalar(value), parents,
                  [=, attr_grad = std::move(attr_grad), cat_grad = std::move(cat_grad)](Graph& gr, const Tensor& dout) {
                    const double d = dout[0];
                    if (has_attr)
                      if (Tensor* s = gr.grad_sink(attr_id)) s->add_scaled_(attr_grad, d);
                    if (has_cat)
                      if (Tensor* s = gr.grad_sink(cat_id)) s->add_scaled_(cat_grad, d);
                  });
}

Var zero_loss(const BatchOutput& batch) {
  Graph& g = batch.attribute_logits.valid() ? batch.attribute_logits.graph() : batch.category_logits.graph();
  return g.constant(Tensor::scalar(0.0));
}

void require_gamma(double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0, got " + std::to_string(gamma));
}

// d(e^gamma)/de, defined as 0 for gamma == 0.
double weight_slope(double e, double gamma) { return gamma == 0.0 ? 0.0 : gamma * std::pow(e, gamma - 1.0); }

LossResult modulated_mean(const BatchOutput& batch, double gamma, const std::vector<double>* priors,
                          bool differentiate_weights, const char* op) {
  require_gamma(gamma);
  const NodeTerms t = node_terms(batch, {});
  const std::size_t total = t.size();
  std::vector<double> scale(total, 1.0);
  if (priors) {
    if (priors->size() != t.n) {
      throw DimensionError("expected " + std::to_string(t.n) + " attribute priors, got " + std::to_string(priors->size()));
    }
    for (std::size_t k = 0; k < t.binary(); ++k) scale[k] = std::exp(-(*priors)[k % t.n]);
  }
  double value = 0.0, weight_sum = 0.0;
  std::vector<double> a(total), b;
  if (differentiate_weights) b.resize(total);
  const double inv = 1.0 / static_cast<double>(total);
  for (std::size_t k = 0; k < total; ++k) {
    const double w = std::pow(t.err[k], gamma);
    weight_sum += w;
    value += scale[k] * w * t.loss[k];
    a[k] = scale[k] * w * inv;
    if (differentiate_weights) b[k] = scale[k] * weight_slope(t.err[k], gamma) * t.loss[k] * inv;
  }
  if (!(weight_sum > 0.0)) return {zero_loss(batch), true};
  return {record_loss(batch, t, value * inv, std::move(a), std::move(b), op), false};
}

}  // namespace

LossResult habp_loss(const BatchOutput& batch, double gamma, const BaseLossSpec& base, bool differentiate_weights) {
  require_gamma(gamma);
  const NodeTerms t = node_terms(batch, base);
  const std::size_t total = t.size();
  std::vector<double> w(total);
  double weight_sum = 0.0, weighted = 0.0;
  for (std::size_t k = 0; k < total; ++k) {
    w[k] = std::pow(t.err[k], gamma);
    weight_sum += w[k];
    weighted += w[k] * t.loss[k];
  }
  if (!(weight_sum > 0.0)) return {zero_loss(batch), true};
  const double value = weighted / weight_sum;
  std::vector<double> a(total), b;
  for (std::size_t k = 0; k < total; ++k) a[k] = w[k] / weight_sum;
  if (differentiate_weights) {
    b.resize(total);
    for (std::size_t k = 0; k < total; ++k) b[k] = weight_slope(t.err[k], gamma) * (t.loss[k] - value) / weight_sum;
  }
  return {record_loss(batch, t, value, std::move(a), std::move(b), "habp"), false};
}

LossResult focal_loss(const BatchOutput& batch, double gamma, bool differentiate_weights) {
  return modulated_mean(batch, gamma, nullptr, differentiate_weights, "focal");
}

LossResult weighted_focal_loss(const BatchOutput& batch, double gamma, const std::vector<double>& priors,
                               bool differentiate_weights) {
  return modulated_mean(batch, gamma, &priors, differentiate_weights, "weighted_focal");
}

LossResult ohem_loss(const BatchOutput& batch, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("ohem ratio must lie in (0, 1], got " + std::to_string(ratio));
  const NodeTerms t = node_terms(batch, {});
  const std::size_t total = t.size();
  // The small offset keeps ratios such as 0.5 of 6 from rounding up through
  // representation error.
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(total) - 1e-9)), 1, total);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return t.loss[x] > t.loss[y]; });
  std::vector<double> a(total, 0.0);
  double value = 0.0;
  const double inv = 1.0 / static_cast<double>(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    value += t.loss[order[r]];
    a[order[r]] = inv;
  }
  return {record_loss(batch, t, value * inv, std::move(a), {}, "ohem"), false};
}

LossResult weighted_ce_loss(const BatchOutput& batch, const BaseLossSpec& base) {
  const NodeTerms t = node_terms(batch, base);
  const std::size_t total = t.size();
  const double inv = 1.0 / static_cast<double>(total);
  double value = 0.0;
  for (double l : t.loss) value += l;
  return {record_loss(batch, t, value * inv, std::vector<double>(total, inv), {}, "weighted_ce"), false};
}

Var deact_multiclass(Var logits, double threshold) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("deact_multiclass: expected [M x C], got " + to_string(z.shape()));
  const double inv = 1.0 / static_cast<double>(z.size());
  Tensor excess(z.shape());
  double value = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    excess[i] = std::max(z[i] - threshold, 0.0);
    value += excess[i] * excess[i];
  }
  const auto id = logits.id();
  return logits.graph().record("deact_multiclass", Tensor::scalar(value * inv), {logits},
                               [id, inv, excess = std::move(excess)](Graph& g, const Tensor& dout) {
                                 if (Tensor* s = g.grad_sink(id)) s->add_scaled_(excess, 2.0 * inv * dout[0]);
                               });
}

Var deact_binary(Var logits) { return mean(square(logits)); }

Var deact_weighted(Var logits, const Tensor& node_scores) {
  const Tensor& z = logits.value();
  require_same_shape(z, node_scores, "deact_weighted");
  double total = 0.0;
  for (double s : node_scores.data()) {
    if (!(s >= 0.0)) throw ConfigError("deact_weighted: scores must be non-negative");
    total += s;
  }
  Tensor weights = node_scores;
  if (!(total > 0.0)) {
    spdlog::warn("deact_weighted: score sum is zero, using uniform weights");
    weights.fill(1.0);
    total = static_cast<double>(weights.size());
  }
  weights.scale_(1.0 / total);
  double value = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) value += weights[i] * z[i] * z[i];
  const auto id = logits.id();
  Tensor zv = z;
  return logits.graph().record("deact_weighted", Tensor::scalar(value), {logits},
                               [id, weights = std::move(weights), zv = std::move(zv)](Graph& g, const Tensor& dout) {
                                 if (Tensor* s = g.grad_sink(id)) {
                                   for (std::size_t i = 0; i < zv.size(); ++i) (*s)[i] += 2.0 * weights[i] * zv[i] * dout[0];
                                 }
                               });
}

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0, got " + std::to_string(gamma));
  if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be >= 0, got " + std::to_string(lambda));
  if (!std::isfinite(threshold)) throw ConfigError("loss.threshold must be finite");
  if (!(ohem_ratio > 0.0 && ohem_ratio <= 1.0)) {
    throw ConfigError("loss.ohem_ratio must lie in (0, 1], got " + std::to_string(ohem_ratio));
  }
}

Var combined_loss(Var base, std::optional<Var> deact, double lambda) {
  if (!deact) return base;
  return add(base, scale(*deact, lambda));
}

}  // namespace hardaware
