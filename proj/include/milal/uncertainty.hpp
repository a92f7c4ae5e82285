#pragma once

// Monte Carlo dropout uncertainty and relevance ranking.
//
// For one bag, N stochastic forward passes (dropout on, batch norm on running
// statistics) give N attention vectors and N predicted classes. Two scores
// come out of them:
//
//   attention uncertainty   U_att = (1/M) sum_i std_n(a_{i,n})   (population std)
//   class agreement         U_cls = (1/N) sum_n [c_n == c_GT]
//
// U_att is min-max normalized over the pool being ranked; the relevance of a
// bag is U_att_norm + (1 - U_cls), so both addends grow with uncertainty.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "milal/autodiff.hpp"
#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/model.hpp"
#include "milal/random.hpp"

namespace milal {

struct McSample {
  int index = 0;  // 1-based inference number
  int predicted = 0;
  Eigen::VectorXd attention_logits;   // M
  Eigen::VectorXd attention_weights;  // M, softmax of the logits
};

/// Which attention quantity the std is computed over.
enum class AttentionSource { Logits, Weights };

/// `n` stochastic passes with dropout active and batch norm on running
/// statistics. Consumes `rng` sequentially.
inline std::vector<McSample> mc_infer(const MilModel& model, const Matrix& instances, int n, Rng& rng) {
  if (n < 2) throw ParameterError("mc_infer: need at least 2 inferences, got " + std::to_string(n));
  std::vector<McSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    Graph g;
    ForwardResult fw = forward(g, model, instances, Mode::McDropout, &rng);
    McSample s;
    s.index = k + 1;
    Eigen::Index arg = 0;
    g.value(fw.bag_logits).row(0).maxCoeff(&arg);
    s.predicted = static_cast<int>(arg);
    s.attention_logits = g.value(fw.attention_logits).col(0);
    s.attention_weights = g.value(fw.attention_weights).row(0).transpose();
    out.push_back(std::move(s));
  }
  return out;
}

struct PatchStats {
  Eigen::VectorXd mean;  // per patch, across inferences
  Eigen::VectorXd std;   // population std per patch
};

inline PatchStats patch_statistics(std::span<const McSample> samples,
                                   AttentionSource source = AttentionSource::Logits) {
  if (samples.size() < 2) throw ContractError("patch_statistics: need at least 2 samples");
  auto pick = [source](const McSample& s) -> const Eigen::VectorXd& {
    return source == AttentionSource::Logits ? s.attention_logits : s.attention_weights;
  };
  const auto m = pick(samples.front()).size();
  for (const auto& s : samples) {
    if (pick(s).size() != m) throw ContractError("patch_statistics: samples have different bag sizes");
  }
  // Welford updates: identical inferences leave the spread at exactly 0.
  PatchStats p;
  p.mean = pick(samples.front());
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(m);
  double k = 1.0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    k += 1.0;
    const Eigen::VectorXd delta = pick(samples[i]) - p.mean;
    p.mean += delta / k;
    sq += delta.cwiseProduct(pick(samples[i]) - p.mean);
  }
  p.std = (sq / k).cwiseMax(0.0).array().sqrt();
  return p;
}

/// Mean over patches of the per-patch population std.
inline double attention_uncertainty(std::span<const McSample> samples,
                                    AttentionSource source = AttentionSource::Logits) {
  return patch_statistics(samples, source).std.mean();
}

/// Fraction of inferences whose predicted class equals the ground truth.
inline double classification_uncertainty(std::span<const McSample> samples, int ground_truth) {
  if (samples.empty()) return 0.0;
  std::size_t agree = 0;
  for (const auto& s : samples) agree += s.predicted == ground_truth ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(samples.size());
}

struct UncertaintyReport {
  std::string bag_id;
  int label = 0;
  double u_att_raw = 0.0;
  double u_att_norm = 0.0;
  double u_cls = 0.0;
  Eigen::VectorXd mean_attention;
  Eigen::VectorXd patch_std;
  double relevance = 0.0;
};

/// Combines (U_att_norm, U_cls) into a relevance score.
using RelevanceCombiner = std::function<double(double, double)>;

inline double default_relevance(double u_att_norm, double u_cls) { return u_att_norm + (1.0 - u_cls); }

inline RelevanceCombiner combiner_by_name(const std::string& name) {
  if (name == "sum") return default_relevance;
  if (name == "attention") return [](double a, double) { return a; };
  if (name == "class") return [](double, double c) { return 1.0 - c; };
  throw ConfigError("unknown relevance combiner '" + name + "' (expected sum, attention or class)");
}

inline UncertaintyReport make_report(const std::string& bag_id, int label,
                                     std::span<const McSample> samples,
                                     AttentionSource source = AttentionSource::Logits) {
  UncertaintyReport r;
  r.bag_id = bag_id;
  r.label = label;
  PatchStats p = patch_statistics(samples, source);
  r.u_att_raw = p.std.mean();
  r.mean_attention = std::move(p.mean);
  r.patch_std = std::move(p.std);
  r.u_cls = classification_uncertainty(samples, label);
  return r;
}

/// Min-max normalization of U_att over the pool; a degenerate range maps
/// every bag to 0.
inline void normalize_uncertainties(std::span<UncertaintyReport> pool) {
  if (pool.empty()) return;
  double lo = pool.front().u_att_raw, hi = lo;
  for (const auto& r : pool) {
    lo = std::min(lo, r.u_att_raw);
    hi = std::max(hi, r.u_att_raw);
  }
  for (auto& r : pool) r.u_att_norm = hi > lo ? (r.u_att_raw - lo) / (hi - lo) : 0.0;
}

inline double relevance(const UncertaintyReport& r, const RelevanceCombiner& combine = default_relevance) {
  return combine(r.u_att_norm, r.u_cls);
}

/// Fills `relevance` and returns bag ids by descending relevance, ties by
/// ascending id.
inline std::vector<std::string> rank_pool(std::span<UncertaintyReport> pool,
                                          const RelevanceCombiner& combine = default_relevance) {
  for (auto& r : pool) r.relevance = relevance(r, combine);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pool[a].relevance != pool[b].relevance) return pool[a].relevance > pool[b].relevance;
    return pool[a].bag_id < pool[b].bag_id;
  });
  std::vector<std::string> ids;
  ids.reserve(order.size());
  for (auto i : order) ids.push_back(pool[i].bag_id);
  return ids;
}

}  // namespace milal
