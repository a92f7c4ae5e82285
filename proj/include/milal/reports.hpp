#pragma once

// Comma-separated output tables. Every file starts with comment lines:
//
//   # schema=milal.<kind>/1
//   # <section.key>=<value>     (effective configuration)
//   # <extra metadata>
//   <header row>
//   <rows>
//
// Reals use the shortest round-trip representation, so identical runs give
// byte-identical files.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "milal/active_learning.hpp"
#include "milal/config.hpp"
#include "milal/model.hpp"
#include "milal/uncertainty.hpp"

namespace milal {

class CsvTable {
 public:
  CsvTable(std::string kind, std::vector<std::string> columns)
      : kind_(std::move(kind)), columns_(std::move(columns)) {}

  void echo_config(const RunConfig& cfg) {
    for (const auto& [k, v] : cfg.to_entries()) {
      if (!is_operational_key(k)) meta(k, v);
    }
  }
  void meta(const std::string& key, const std::string& value) { meta_.emplace_back(key, value); }

  CsvTable& row(std::vector<std::string> cells) {
    if (cells.size() != columns_.size()) {
      throw ContractError("csv '" + kind_ + "': row has " + std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(columns_.size()));
    }
    rows_.push_back(std::move(cells));
    return *this;
  }

  std::size_t size() const { return rows_.size(); }

  std::string str() const {
    std::string out = "# schema=milal." + kind_ + "/1\n";
    for (const auto& [k, v] : meta_) out += "# " + k + "=" + v + "\n";
    append_line(out, columns_);
    for (const auto& r : rows_) append_line(out, r);
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot write '" + path.string() + "'");
    f << str();
  }

 private:
  static void append_line(std::string& out, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  }

  std::string kind_;
  std::vector<std::string> columns_;
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string num(double v) { return detail::fmt(v); }
inline std::string num(std::size_t v) { return std::to_string(v); }
inline std::string num(int v) { return std::to_string(v); }

inline CsvTable al_curve_table(const RunConfig& cfg) {
  CsvTable t("al-curve",
             {"cycle", "n_annotated", "strategy", "variant", "accuracy", "weighted_f1", "auroc", "seed"});
  t.echo_config(cfg);
  return t;
}

/// Rows for cycles 1..C of one run; the bag-label-only cycle 0 goes to the
/// metadata block.
inline void append_al_run(CsvTable& t, const ALState& s) {
  for (const auto& r : s.history) {
    if (r.cycle == 0) {
      t.meta("baseline." + s.strategy + "." + std::to_string(s.run_seed),
             "accuracy:" + num(r.metrics.accuracy) + ";weighted_f1:" + num(r.metrics.weighted_f1) +
                 ";auroc:" + num(r.metrics.auroc));
      continue;
    }
    t.row({num(r.cycle), num(r.n_annotated), s.strategy, s.variant, num(r.metrics.accuracy),
           num(r.metrics.weighted_f1), num(r.metrics.auroc), std::to_string(s.run_seed)});
  }
}

inline CsvTable uncertainty_table(const RunConfig& cfg, std::span<const UncertaintyReport> ranked) {
  CsvTable t("uncertainty", {"bag_id", "label", "u_att_raw", "u_att_norm", "u_cls", "relevance"});
  t.echo_config(cfg);
  t.meta("mc_samples", num(cfg.al.mc_samples));
  for (const auto& r : ranked) {
    t.row({r.bag_id, std::string(label_name(r.label)), num(r.u_att_raw), num(r.u_att_norm), num(r.u_cls),
           num(r.relevance)});
  }
  return t;
}

inline CsvTable train_log_table(const RunConfig& cfg, std::span<const EpochStats> history) {
  CsvTable t("train-log", {"epoch", "sic", "mil", "agl", "total", "sic_weight", "main_weight", "agl_bags"});
  t.echo_config(cfg);
  for (const auto& e : history) {
    t.row({num(e.epoch), num(e.sic), num(e.mil), num(e.agl), num(e.total), num(e.sic_weight), num(e.main_weight),
           num(e.agl_bags)});
  }
  return t;
}

inline CsvTable metrics_table(const RunConfig& cfg, const MetricsRecord& m, std::size_t n_test) {
  CsvTable t("metrics", {"variant", "n_test", "accuracy", "weighted_f1", "auroc", "missing_class"});
  t.echo_config(cfg);
  t.row({cfg.variant.name(), num(n_test), num(m.accuracy), num(m.weighted_f1), num(m.auroc),
         m.missing_class ? "true" : "false"});
  return t;
}

inline CsvTable ablation_table(const RunConfig& cfg, const AblationResult& res) {
  CsvTable t("ablation", {"variant", "accuracy_mean", "accuracy_std", "weighted_f1_mean", "weighted_f1_std",
                          "auroc_mean", "auroc_std"});
  t.echo_config(cfg);
  std::string seeds;
  for (std::size_t i = 0; i < res.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(res.seeds[i]);
  t.meta("runs", num(res.seeds.size()));
  t.meta("seeds", seeds);
  for (const auto& r : res.rows) {
    t.row({r.variant.name(), num(r.accuracy.mean), num(r.accuracy.std), num(r.weighted_f1.mean),
           num(r.weighted_f1.std), num(r.auroc.mean), num(r.auroc.std)});
  }
  return t;
}

inline std::string ablation_text(const AblationResult& res) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "variant      accuracy         weighted F1      AUROC\n";
  for (const auto& r : res.rows) {
    std::string name = r.variant.name();
    name.resize(12, ' ');
    os << name << " " << r.accuracy.mean << " +- " << r.accuracy.std << "  " << r.weighted_f1.mean << " +- "
       << r.weighted_f1.std << "  " << r.auroc.mean << " +- " << r.auroc.std << "\n";
  }
  os << "seeds:";
  for (auto s : res.seeds) os << " " << s;
  os << "\n";
  return os.str();
}

struct PatchRow {
  std::size_t patch = 0;
  double mean_logit = 0.0;
  double attention_weight = 0.0;
  double std = 0.0;
  bool annotated = false;
};

/// Per-patch attention for one bag: MC mean logit and std, the deterministic
/// attention weight and whether the patch is in the revealed RoI.
inline std::vector<PatchRow> patch_rows(const MilModel& model, const FeatureBag& bag, int mc_samples, Rng& rng) {
  auto samples = mc_infer(model, bag.instances, mc_samples, rng);
  PatchStats stats = patch_statistics(samples, AttentionSource::Logits);
  BagPrediction p = predict(model, bag.instances);
  std::vector<bool> in_roi(bag.size(), false);
  if (bag.annotation) {
    for (auto i : *bag.annotation) {
      if (i < in_roi.size()) in_roi[i] = true;
    }
  }
  std::vector<PatchRow> rows(bag.size());
  for (std::size_t i = 0; i < bag.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    rows[i] = {i, stats.mean(k), p.attention_weights(k), stats.std(k), in_roi[i]};
  }
  return rows;
}

inline CsvTable attention_table(const RunConfig& cfg, const std::string& bag_id, std::span<const PatchRow> rows) {
  CsvTable t("attention", {"bag_id", "patch", "mean_logit", "attention_weight", "std", "annotated"});
  t.echo_config(cfg);
  t.meta("mc_samples", num(cfg.al.mc_samples));
  for (const auto& r : rows) {
    t.row({bag_id, num(r.patch), num(r.mean_logit), num(r.attention_weight), num(r.std),
           r.annotated ? "true" : "false"});
  }
  return t;
}

}  // namespace milal
