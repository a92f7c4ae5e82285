#pragma once

// Classification metrics: accuracy, support-weighted F1 and support-weighted
// one-vs-rest AUROC (Mann-Whitney rank statistic, ties count one half).

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "milal/autodiff.hpp"
#include "milal/error.hpp"

namespace milal {

struct MetricsRecord {
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  double auroc = 0.0;
  std::vector<std::size_t> support;  // per class
  // Some class had no examples (or AUROC was undefined for it) and was left
  // out of the weighted averages.
  bool missing_class = false;

  bool operator==(const MetricsRecord&) const = default;
};

/// Area under the ROC curve of `scores` for the binary labels `positive`,
/// via the Mann-Whitney U statistic with midranks for ties. Returns NaN when
/// either side is empty.
inline double binary_auroc(std::span<const double> scores, std::span<const bool> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (positive[order[k]]) {
        rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::nan("");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// `probabilities` is n x K with rows summing to 1.
inline MetricsRecord compute_metrics(std::span<const int> predictions, const Matrix& probabilities,
                                     std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (predictions.size() != n || static_cast<std::size_t>(probabilities.rows()) != n) {
    throw InputError("compute_metrics: predictions, probabilities and labels differ in length");
  }
  if (n == 0) throw InputError("compute_metrics: no samples");
  const auto k = static_cast<std::size_t>(probabilities.cols());
  for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
    if (std::abs(probabilities.row(r).sum() - 1.0) > 1e-6) {
      throw InputError("compute_metrics: probability row " + std::to_string(r) + " does not sum to 1");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k || predictions[i] < 0 ||
        static_cast<std::size_t>(predictions[i]) >= k) {
      throw InputError("compute_metrics: class index out of range");
    }
  }

  MetricsRecord m;
  m.support.assign(k, 0);
  std::vector<std::size_t> tp(k, 0), predicted(k, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto p = static_cast<std::size_t>(predictions[i]);
    m.support[y] += 1;
    predicted[p] += 1;
    if (y == p) {
      tp[y] += 1;
      correct += 1;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  double f1_sum = 0.0, f1_weight = 0.0;
  double auc_sum = 0.0, auc_weight = 0.0;
  std::vector<double> scores(n);
  auto positive = std::make_unique<bool[]>(n);
  for (std::size_t c = 0; c < k; ++c) {
    if (m.support[c] == 0) {
      m.missing_class = true;
      continue;
    }
    const double support = static_cast<double>(m.support[c]);
    const double precision = predicted[c] ? static_cast<double>(tp[c]) / static_cast<double>(predicted[c]) : 0.0;
    const double recall = static_cast<double>(tp[c]) / support;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    f1_sum += support * f1;
    f1_weight += support;

    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probabilities(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      positive[i] = static_cast<std::size_t>(labels[i]) == c;
    }
    const double auc = binary_auroc(scores, std::span<const bool>(positive.get(), n));
    if (std::isnan(auc)) {
      m.missing_class = true;
      continue;
    }
    auc_sum += support * auc;
    auc_weight += support;
  }
  m.weighted_f1 = f1_weight > 0.0 ? f1_sum / f1_weight : 0.0;
  m.auroc = auc_weight > 0.0 ? auc_sum / auc_weight : 0.5;
  return m;
}

}  // namespace milal
