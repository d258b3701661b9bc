#include "hardaware/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "hardaware/errors.hpp"
#include "hardaware/ops.hpp"
#include "linalg.hpp"

namespace hardaware {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_matrix_pair(const Tensor& scores, const Tensor& labels, const char* what) {
  if (scores.rank() != 2) throw DimensionError(std::string(what) + ": expected [M x N] scores, got " + to_string(scores.shape()));
  require_same_shape(scores, labels, what);
}

}  // namespace

GroupMap GroupMap::single(std::size_t attributes) { return {std::vector<std::size_t>(attributes, 0), {"all"}}; }

void GroupMap::validate(std::size_t attributes) const {
  if (group_of.size() != attributes) {
    throw ConfigError("group map covers " + std::to_string(group_of.size()) + " attributes, expected " +
                      std::to_string(attributes));
  }
  for (std::size_t g : group_of)
    if (g >= names.size()) throw ConfigError("group id " + std::to_string(g) + " has no name");
}

RecallReport topk_recall(const Tensor& scores, const Tensor& labels, std::size_t k, const GroupMap& groups,
                         bool capped) {
  if (k == 0) throw ConfigError("top-k recall needs k >= 1");
  require_matrix_pair(scores, labels, "topk_recall");
  const std::size_t m = scores.dim(0), n = scores.dim(1);
  groups.validate(n);
  std::vector<std::vector<std::size_t>> members(groups.groups());
  for (std::size_t j = 0; j < n; ++j) members[groups.group_of[j]].push_back(j);

  RecallReport report;
  double hit_all = 0.0, pos_all = 0.0;
  for (const auto& attrs : members) {
    double hits = 0.0, positives = 0.0;
    std::vector<std::size_t> order(attrs.size());
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t pos = 0;
      for (std::size_t j : attrs) pos += labels[i * n + j] == 1.0;
      if (pos == 0) continue;
      order = attrs;  // ascending attribute index, so stable sort breaks ties low
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return scores[i * n + a] > scores[i * n + b]; });
      const std::size_t top = std::min(k, order.size());
      for (std::size_t r = 0; r < top; ++r) hits += labels[i * n + order[r]] == 1.0;
      positives += static_cast<double>(capped ? std::min(k, pos) : pos);
    }
    report.per_group.push_back(positives > 0.0 ? hits / positives : kNaN);
    hit_all += hits;
    pos_all += positives;
  }
  report.overall = pos_all > 0.0 ? hit_all / pos_all : kNaN;
  return report;
}

double topk_accuracy(const Tensor& scores, const std::vector<int>& labels, std::size_t k) {
  if (scores.rank() != 2) throw DimensionError("topk_accuracy: expected [M x C] scores, got " + to_string(scores.shape()));
  const std::size_t m = scores.dim(0), c = scores.dim(1);
  if (k == 0 || k > c) throw ConfigError("top-k accuracy needs 1 <= k <= " + std::to_string(c) + ", got " + std::to_string(k));
  if (labels.size() != m) throw DimensionError("topk_accuracy: label count differs from score rows");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int t = labels[i];
    if (t < 0 || static_cast<std::size_t>(t) >= c) throw LabelError("class label " + std::to_string(t) + " out of range");
    const double st = scores[i * c + static_cast<std::size_t>(t)];
    // Rank of t under (score desc, index asc).
    std::size_t ahead = 0;
    for (std::size_t q = 0; q < c; ++q) {
      const double sq = scores[i * c + q];
      ahead += sq > st || (sq == st && q < static_cast<std::size_t>(t));
    }
    correct += ahead < k;
  }
  return static_cast<double>(correct) / static_cast<double>(m);
}

BalancedAccuracyReport class_balanced_accuracy(const Tensor& logits, const Tensor& labels, const GroupMap& groups,
                                               double threshold) {
  require_matrix_pair(logits, labels, "class_balanced_accuracy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  groups.validate(n);
  BalancedAccuracyReport r;
  r.per_attribute.assign(n, kNaN);
  std::vector<double> group_sum(groups.groups(), 0.0);
  std::vector<std::size_t> group_count(groups.groups(), 0);
  double total = 0.0;
  std::size_t included = 0;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t p = 0, neg = 0, tp = 0, tn = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool pred = stable_sigmoid(logits[i * n + j]) >= threshold;
      if (labels[i * n + j] == 1.0) {
        ++p;
        tp += pred;
      } else {
        ++neg;
        tn += !pred;
      }
    }
    if (p == 0 || neg == 0) {
      r.excluded.push_back(j);
      continue;
    }
    const double b = 0.5 * (static_cast<double>(tp) / static_cast<double>(p) +
                            static_cast<double>(tn) / static_cast<double>(neg));
    r.per_attribute[j] = b;
    group_sum[groups.group_of[j]] += b;
    ++group_count[groups.group_of[j]];
    total += b;
    ++included;
  }
  for (std::size_t g = 0; g < groups.groups(); ++g) {
    r.per_group.push_back(group_count[g] ? group_sum[g] / static_cast<double>(group_count[g]) : kNaN);
  }
  r.overall = included ? total / static_cast<double>(included) : kNaN;
  return r;
}

GaussianSummary GaussianSummary::fit(const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) < 2) {
    throw DimensionError("Gaussian fit needs a [n x d] matrix with n >= 2, got " + to_string(features.shape()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1);
  const auto x = detail::view(features.ptr(), n, d);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const detail::RowMatrix centered = x.rowwise() - mu;
  const detail::RowMatrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  GaussianSummary s;
  s.mean.assign(mu.data(), mu.data() + d);
  s.covariance.assign(cov.data(), cov.data() + d * d);
  s.count = n;
  return s;
}

namespace {

// Symmetric PSD square root with negative eigenvalues clipped to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) {
    throw NumericError(std::string("eigendecomposition of ") + what + " did not converge (" +
                       std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", max |entry| " +
                       std::to_string(m.cwiseAbs().maxCoeff()) + ")");
  }
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd as_matrix(const GaussianSummary& s) { return detail::view(s.covariance.data(), s.dim(), s.dim()); }

}  // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim() || a.dim() == 0) {
    throw DimensionError("Frechet distance needs equal nonzero dimensions, got " + std::to_string(a.dim()) + " and " +
                         std::to_string(b.dim()));
  }
  const std::size_t d = a.dim();
  if (a.covariance.size() != d * d || b.covariance.size() != d * d) throw DimensionError("covariance size mismatch");
  if (a.count < d + 1 || b.count < d + 1) {
    spdlog::warn("Frechet distance from {} and {} samples in dimension {}; covariance is rank deficient", a.count,
                 b.count, d);
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Eigen::MatrixXd sa = as_matrix(a), sb = as_matrix(b);
  const Eigen::MatrixXd ra = psd_sqrt(sa, "covariance");
  const Eigen::MatrixXd cross = psd_sqrt(ra * sb * ra, "covariance product");
  return mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
}

ErrorCountTable error_vs_count_table(const Tensor& logits, const Tensor& labels) {
  require_matrix_pair(logits, labels, "error_vs_count_table");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  ErrorCountTable t;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t count = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (labels[i * n + j] != 1.0) continue;
      ++count;
      sum += stable_sigmoid(logits[i * n + j]);
    }
    if (count == 0) {
      t.omitted.push_back(j);
    } else {
      t.rows.push_back({j, count, sum / static_cast<double>(count)});
    }
  }
  return t;
}

void ErrorCountTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "attribute_id,positive_count,mean_positive_probability\n" << std::setprecision(17);
  for (const ErrorCountRow& r : rows) out << r.attribute << ',' << r.positives << ',' << r.mean_probability << '\n';
  if (!omitted.empty()) {
    out << "# omitted (no positives):";
    for (std::size_t j : omitted) out << ' ' << j;
    out << '\n';
  }
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("pearson needs two equal-length series of size >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace hardaware
