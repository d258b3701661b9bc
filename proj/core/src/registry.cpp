#include "hardaware/registry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "hardaware/errors.hpp"
#include "hardaware/random.hpp"

namespace hardaware {

HardLabelRegistry::HardLabelRegistry(std::size_t attributes, double gamma, double ema)
    : attributes_(attributes), gamma_(gamma), ema_(ema), scores_(2 * attributes, 0.0), updated_(2 * attributes, -1) {
  if (attributes == 0) throw ConfigError("registry needs at least one attribute");
  if (!(gamma >= 0.0)) throw ConfigError("registry gamma must be >= 0");
  if (!(ema > 0.0 && ema <= 1.0)) throw ConfigError("registry ema coefficient must lie in (0, 1]");
}

double HardLabelRegistry::score(std::size_t j, int v) const { return scores_.at(2 * j + static_cast<std::size_t>(v)); }
bool HardLabelRegistry::initialized(std::size_t j, int v) const {
  return updated_.at(2 * j + static_cast<std::size_t>(v)) >= 0;
}
std::int64_t HardLabelRegistry::last_update(std::size_t j, int v) const {
  return updated_.at(2 * j + static_cast<std::size_t>(v));
}

void HardLabelRegistry::record_batch(const Tensor& labels, const Tensor& positive_probs, std::int64_t step) {
  require_same_shape(labels, positive_probs, "record_batch");
  Tensor w(labels.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(std::abs(labels[i] - positive_probs[i]), gamma_);
  record_errors(labels, w, step);
}

void HardLabelRegistry::record_errors(const Tensor& labels, const Tensor& error_weights, std::int64_t step) {
  require_same_shape(labels, error_weights, "record_errors");
  if (labels.rank() != 2 || labels.dim(1) != attributes_) {
    throw DimensionError("registry expects [M x " + std::to_string(attributes_) + "] labels, got " +
                         to_string(labels.shape()));
  }
  const std::size_t m = labels.dim(0);
  std::vector<double> sum(2 * attributes_, 0.0);
  std::vector<std::size_t> count(2 * attributes_, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < attributes_; ++j) {
      const double y = labels[i * attributes_ + j];
      if (y != 0.0 && y != 1.0) throw LabelError("registry label " + std::to_string(y) + " is not 0 or 1");
      const std::size_t cell = 2 * j + (y == 1.0 ? 1 : 0);
      sum[cell] += error_weights[i * attributes_ + j];
      ++count[cell];
    }
  for (std::size_t cell = 0; cell < sum.size(); ++cell) {
    if (count[cell] == 0) continue;
    const double mean = sum[cell] / static_cast<double>(count[cell]);
    scores_[cell] = updated_[cell] < 0 ? mean : ema_ * mean + (1.0 - ema_) * scores_[cell];
    updated_[cell] = step;
  }
}

std::vector<double> HardLabelRegistry::sampling_pmf(int v) const {
  if (v != 0 && v != 1) throw LabelError("label value must be 0 or 1");
  std::vector<double> p(attributes_, 0.0);
  double total = 0.0;
  std::size_t live = 0;
  for (std::size_t j = 0; j < attributes_; ++j) {
    if (!initialized(j, v)) continue;
    p[j] = score(j, v);
    total += p[j];
    ++live;
  }
  if (live == 0) throw ConfigError("registry has no recorded scores for label value " + std::to_string(v));
  if (!(total > 0.0)) {
    spdlog::warn("registry scores for label value {} sum to zero; sampling uniformly", v);
    for (std::size_t j = 0; j < attributes_; ++j) p[j] = initialized(j, v) ? 1.0 / static_cast<double>(live) : 0.0;
    return p;
  }
  for (double& x : p) x /= total;
  return p;
}

Tensor HardLabelRegistry::sample_hard_labels(std::size_t batch, std::size_t k, std::uint64_t seed,
                                             std::uint64_t index) const {
  if (batch == 0) throw ConfigError("hard-label batch must be positive");
  const std::vector<double> pmf = sampling_pmf(1);
  const auto support = static_cast<std::size_t>(std::count_if(pmf.begin(), pmf.end(), [](double x) { return x > 0.0; }));
  if (k > support) {
    spdlog::warn("requested {} labels per sample but only {} attributes have mass; truncating", k, support);
    k = support;
  }
  auto rng = make_rng(seed, streams::kHardLabels, index);
  Tensor out({batch, attributes_}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> w = pmf;
    for (std::size_t draw = 0; draw < k; ++draw) {
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      const std::size_t j = pick(rng);
      out[b * attributes_ + j] = 1.0;
      w[j] = 0.0;
    }
  }
  return out;
}

Tensor HardLabelRegistry::node_scores(const Tensor& labels) const {
  if (labels.rank() != 2 || labels.dim(1) != attributes_) {
    throw DimensionError("registry expects [M x " + std::to_string(attributes_) + "] labels, got " +
                         to_string(labels.shape()));
  }
  Tensor s(labels.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t cell = 2 * (i % attributes_) + (labels[i] == 1.0 ? 1 : 0);
    s[i] = updated_[cell] >= 0 ? scores_[cell] : 0.0;
  }
  return s;
}

nlohmann::json HardLabelRegistry::snapshot() const {
  // Scores travel as raw bit patterns so restore is exact.
  std::vector<std::uint64_t> bits(scores_.size());
  std::transform(scores_.begin(), scores_.end(), bits.begin(), [](double x) { return std::bit_cast<std::uint64_t>(x); });
  return {{"attributes", attributes_},
          {"gamma", std::bit_cast<std::uint64_t>(gamma_)},
          {"ema", std::bit_cast<std::uint64_t>(ema_)},
          {"scores", bits},
          {"updated", updated_}};
}

HardLabelRegistry HardLabelRegistry::restore(const nlohmann::json& j) {
  try {
    HardLabelRegistry r(j.at("attributes").get<std::size_t>(), std::bit_cast<double>(j.at("gamma").get<std::uint64_t>()),
                        std::bit_cast<double>(j.at("ema").get<std::uint64_t>()));
    const auto bits = j.at("scores").get<std::vector<std::uint64_t>>();
    auto updated = j.at("updated").get<std::vector<std::int64_t>>();
    if (bits.size() != r.scores_.size() || updated.size() != r.updated_.size()) {
      throw FormatError("registry snapshot has inconsistent sizes", 0);
    }
    std::transform(bits.begin(), bits.end(), r.scores_.begin(), [](std::uint64_t b) { return std::bit_cast<double>(b); });
    r.updated_ = std::move(updated);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed registry snapshot: ") + e.what(), 0);
  }
}

void HardLabelRegistry::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "attribute_id,S_pos,S_neg,step\n" << std::setprecision(17);
  for (std::size_t j = 0; j < attributes_; ++j) {
    out << j << ',' << score(j, 1) << ',' << score(j, 0) << ','
        << std::max(last_update(j, 0), last_update(j, 1)) << '\n';
  }
}

}  // namespace hardaware
