#pragma once

// Feature bags and the synthetic benchmark generator.
//
// A bag is one slide: an M x D matrix of instance feature vectors with a
// single lesion-category label. The generator plants tumor instances in every
// positive bag, in a proportion that depends on the category, and mixes the
// remaining instances between a normal-tissue cluster and a handful of
// distractor clusters that occur in every class. The distractor share varies
// from bag to bag, so the bag mean alone says little about the label.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "milal/autodiff.hpp"
#include "milal/error.hpp"
#include "milal/random.hpp"

namespace milal {

inline constexpr int kNumClasses = 4;
inline constexpr int kNegativeClass = 0;

enum class Lesion : int { Negative = 0, Itc = 1, Micro = 2, Macro = 3 };

inline std::string_view label_name(int label) {
  static constexpr std::array<std::string_view, kNumClasses> names{"negative", "itc", "micro",
                                                                   "macro"};
  if (label < 0 || label >= kNumClasses) throw InputError("unknown label code " + std::to_string(label));
  return names[static_cast<std::size_t>(label)];
}

inline int parse_label(std::string_view s) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (label_name(c) == s) return c;
  }
  throw InputError("unknown label '" + std::string(s) + "'");
}

using IndexSet = std::vector<std::uint32_t>;

struct FeatureBag {
  std::string id;
  int label = kNegativeClass;
  Matrix instances;  // M x D
  // Revealed RoI. Present once the bag has been through the oracle; empty
  // for negative bags (see `negative_confirmed`).
  std::optional<IndexSet> annotation;
  bool negative_confirmed = false;
  // Generator ground truth. Never visible on the training path.
  std::optional<IndexSet> tumor_indices;

  std::size_t size() const { return static_cast<std::size_t>(instances.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(instances.cols()); }
  bool is_annotated() const { return annotation.has_value(); }
  bool has_roi() const { return annotation.has_value() && !annotation->empty(); }

  bool operator==(const FeatureBag& o) const {
    return id == o.id && label == o.label && instances.rows() == o.instances.rows() &&
           instances.cols() == o.instances.cols() && instances == o.instances && annotation == o.annotation &&
           negative_confirmed == o.negative_confirmed && tumor_indices == o.tumor_indices;
  }
};

struct FractionRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct GeneratorConfig {
  int bags_per_class = 25;
  int min_instances = 100;
  int max_instances = 400;
  int dim = 32;
  // Tumor fraction per class, indexed by label code. Negative is fixed at 0.
  std::array<FractionRange, kNumClasses> tumor_fraction{
      FractionRange{0.0, 0.0}, FractionRange{0.005, 0.05}, FractionRange{0.05, 0.20},
      FractionRange{0.20, 0.50}};
  double tumor_separation = 4.0;      // distance of the tumor mean from the normal mean
  double distractor_separation = 4.0; // distance of each distractor mean from the normal mean
  double spread = 1.0;                // isotropic std of every cluster
  int distractor_clusters = 3;
  FractionRange distractor_share{0.0, 0.6};  // of the non-tumor instances
  std::uint64_t seed = 17;

  void validate() const {
    if (bags_per_class < 1) throw ParameterError("bags_per_class must be >= 1");
    if (min_instances < 1) throw ParameterError("min_instances must be >= 1");
    if (min_instances > max_instances) {
      throw ParameterError("min_instances (" + std::to_string(min_instances) +
                           ") exceeds max_instances (" + std::to_string(max_instances) + ")");
    }
    if (dim < 2) throw ParameterError("feature dim must be >= 2");
    if (tumor_fraction[0].lo != 0.0 || tumor_fraction[0].hi != 0.0) {
      throw ParameterError("negative class tumor fraction must be 0");
    }
    for (int c = 1; c < kNumClasses; ++c) {
      const auto& r = tumor_fraction[static_cast<std::size_t>(c)];
      if (!(r.lo > 0.0 && r.lo <= r.hi && r.hi <= 1.0)) {
        throw ParameterError("tumor fraction range for " + std::string(label_name(c)) +
                             " must satisfy 0 < lo <= hi <= 1");
      }
      if (c > 1 && r.lo < tumor_fraction[static_cast<std::size_t>(c - 1)].hi) {
        throw ParameterError("tumor fraction ranges must be ordered itc < micro < macro");
      }
    }
    if (!(spread > 0.0)) throw ParameterError("spread must be positive");
    if (tumor_separation < 0.0 || distractor_separation < 0.0) {
      throw ParameterError("cluster separations must be non-negative");
    }
    if (distractor_clusters < 0) throw ParameterError("distractor_clusters must be >= 0");
    if (!(distractor_share.lo >= 0.0 && distractor_share.lo <= distractor_share.hi &&
          distractor_share.hi <= 1.0)) {
      throw ParameterError("distractor_share must satisfy 0 <= lo <= hi <= 1");
    }
  }

  /// Canonical text form; the manifest records its hash.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "bags_per_class=" << bags_per_class << ";min_instances=" << min_instances
       << ";max_instances=" << max_instances << ";dim=" << dim;
    for (int c = 0; c < kNumClasses; ++c) {
      const auto& r = tumor_fraction[static_cast<std::size_t>(c)];
      os << ";frac_" << label_name(c) << "=" << r.lo << ":" << r.hi;
    }
    os << ";tumor_separation=" << tumor_separation
       << ";distractor_separation=" << distractor_separation << ";spread=" << spread
       << ";distractor_clusters=" << distractor_clusters << ";distractor_share="
       << distractor_share.lo << ":" << distractor_share.hi << ";seed=" << seed;
    return os.str();
  }
};

/// Cluster centres shared by every bag of one generated dataset.
struct ClusterCentres {
  RowVector normal;
  RowVector tumor;
  std::vector<RowVector> distractors;
};

struct SyntheticDataset {
  std::vector<FeatureBag> bags;
  ClusterCentres centres;
  // Balanced accuracy of a nearest-centroid tumor-vs-normal instance
  // classifier fitted on the ground truth.
  double oracle_accuracy = 0.0;
};

namespace detail {

inline RowVector random_direction(int dim, Rng& rng) {
  RowVector v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  } while (v.norm() < 1e-12);
  return v / v.norm();
}

inline std::size_t tumor_count(const FractionRange& r, double fraction, std::size_t m) {
  const auto md = static_cast<double>(m);
  auto lo = static_cast<std::size_t>(std::ceil(r.lo * md - 1e-9));
  auto hi = static_cast<std::size_t>(std::floor(r.hi * md + 1e-9));
  lo = std::max<std::size_t>(lo, 1);
  hi = std::max(hi, lo);
  const auto n = static_cast<std::size_t>(std::llround(fraction * md));
  return std::clamp(n, lo, std::min(hi, m));
}

}  // namespace detail

/// Nearest-centroid tumor detector fitted on ground truth: balanced accuracy
/// over tumor and normal-cluster instances. Distractor instances are ignored.
inline double nearest_centroid_accuracy(const std::vector<FeatureBag>& bags,
                                        const std::vector<std::vector<bool>>& is_normal) {
  if (bags.empty()) return 0.0;
  const auto dim = bags.front().instances.cols();
  RowVector tumor_sum = RowVector::Zero(dim), normal_sum = RowVector::Zero(dim);
  double n_tumor = 0, n_normal = 0;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    std::vector<bool> tumor(bags[b].size(), false);
    if (bags[b].tumor_indices) {
      for (auto i : *bags[b].tumor_indices) tumor[i] = true;
    }
    for (std::size_t i = 0; i < bags[b].size(); ++i) {
      const auto row = bags[b].instances.row(static_cast<Eigen::Index>(i));
      if (tumor[i]) {
        tumor_sum += row;
        n_tumor += 1;
      } else if (is_normal[b][i]) {
        normal_sum += row;
        n_normal += 1;
      }
    }
  }
  if (n_tumor == 0 || n_normal == 0) return 0.5;
  const RowVector ct = tumor_sum / n_tumor, cn = normal_sum / n_normal;
  double tp = 0, tn = 0;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    std::vector<bool> tumor(bags[b].size(), false);
    if (bags[b].tumor_indices) {
      for (auto i : *bags[b].tumor_indices) tumor[i] = true;
    }
    for (std::size_t i = 0; i < bags[b].size(); ++i) {
      const auto row = bags[b].instances.row(static_cast<Eigen::Index>(i));
      const bool says_tumor = (row - ct).squaredNorm() < (row - cn).squaredNorm();
      if (tumor[i] && says_tumor) tp += 1;
      if (!tumor[i] && is_normal[b][i] && !says_tumor) tn += 1;
    }
  }
  return 0.5 * (tp / n_tumor + tn / n_normal);
}

inline std::string bag_id_for(std::size_t index) {
  std::ostringstream os;
  os << "bag_" << std::setw(3) << std::setfill('0') << index;
  return os.str();
}

/// Deterministic synthetic dataset; bags are ordered class-major with ids
/// bag_000, bag_001, ...
inline SyntheticDataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  SyntheticDataset out;
  Rng geometry(derive_seed(cfg.seed, {stream_tag("geometry")}));
  out.centres.normal = RowVector::Zero(cfg.dim);
  out.centres.tumor = cfg.tumor_separation * detail::random_direction(cfg.dim, geometry);
  for (int d = 0; d < cfg.distractor_clusters; ++d) {
    out.centres.distractors.push_back(cfg.distractor_separation *
                                      detail::random_direction(cfg.dim, geometry));
  }

  std::vector<std::vector<bool>> is_normal;
  std::size_t index = 0;
  for (int label = 0; label < kNumClasses; ++label) {
    const auto& range = cfg.tumor_fraction[static_cast<std::size_t>(label)];
    for (int k = 0; k < cfg.bags_per_class; ++k, ++index) {
      Rng rng(derive_seed(cfg.seed, {stream_tag("bag"), index}));
      const auto m = static_cast<std::size_t>(rng.between(cfg.min_instances, cfg.max_instances));
      std::size_t n_tumor = 0;
      if (label != kNegativeClass) {
        n_tumor = detail::tumor_count(range, rng.uniform(range.lo, range.hi), m);
      }
      const double share = cfg.distractor_clusters > 0
                               ? rng.uniform(cfg.distractor_share.lo, cfg.distractor_share.hi)
                               : 0.0;

      // Instance kinds in generation order: tumor first, then background;
      // a random permutation scatters them.
      std::vector<int> kind(m);  // -1 tumor, 0 normal, j+1 distractor j
      for (std::size_t i = 0; i < m; ++i) {
        if (i < n_tumor) {
          kind[i] = -1;
        } else if (rng.bernoulli(share)) {
          kind[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.distractor_clusters)));
        } else {
          kind[i] = 0;
        }
      }
      rng.shuffle(std::span<int>(kind));

      FeatureBag bag;
      bag.id = bag_id_for(index);
      bag.label = label;
      bag.instances.resize(static_cast<Eigen::Index>(m), cfg.dim);
      IndexSet tumor;
      std::vector<bool> normal(m, false);
      for (std::size_t i = 0; i < m; ++i) {
        const RowVector& centre = kind[i] < 0    ? out.centres.tumor
                                  : kind[i] == 0 ? out.centres.normal
                                                 : out.centres.distractors[static_cast<std::size_t>(kind[i] - 1)];
        for (int d = 0; d < cfg.dim; ++d) {
          bag.instances(static_cast<Eigen::Index>(i), d) = centre(d) + cfg.spread * rng.normal();
        }
        if (kind[i] < 0) tumor.push_back(static_cast<std::uint32_t>(i));
        normal[i] = kind[i] == 0;
      }
      bag.tumor_indices = std::move(tumor);
      is_normal.push_back(std::move(normal));
      out.bags.push_back(std::move(bag));
    }
  }
  out.oracle_accuracy = nearest_centroid_accuracy(out.bags, is_normal);
  return out;
}

/// Copy of the bags with generator ground truth removed.
inline std::vector<FeatureBag> strip_oracle(std::vector<FeatureBag> bags) {
  for (auto& b : bags) b.tumor_indices.reset();
  return bags;
}

}  // namespace milal
