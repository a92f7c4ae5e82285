#pragma once

// Human-in-the-loop simulation.
//
// One run: train on bag labels only (cycle 0), then for each cycle estimate
// uncertainty on the unannotated part of the training pool, let the simulated
// expert annotate the selected bags, retrain and evaluate on the held-out
// test split. The run state is persisted after every cycle so an interrupted
// run can resume and reproduce the uninterrupted result exactly.
//
// Seeds are derived from the run seed with a fixed counter scheme:
//   training of cycle t       derive(run, {"cycle-train", t})
//   MC inference, bag i       derive(run, {"mc", t, i})
//   random selection          derive(run, {"select", t})
// Both strategies therefore share the cycle-0 model.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "milal/bag_io.hpp"
#include "milal/checkpoint.hpp"
#include "milal/config.hpp"
#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/metrics.hpp"
#include "milal/model.hpp"
#include "milal/parallel.hpp"
#include "milal/random.hpp"
#include "milal/uncertainty.hpp"

namespace milal {

// ---------------------------------------------------------------------------
// Split

struct Split {
  std::vector<std::size_t> train;  // ascending indices
  std::vector<std::size_t> test;
};

/// Stratified split. Each class contributes floor(fraction * n_c) test bags;
/// the remaining test slots up to round(fraction * N) go to the classes with
/// the largest fractional remainders (ties to the lower class code).
inline Split stratified_split(std::span<const FeatureBag> bags, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ParameterError("test fraction must lie in (0,1), got " + detail::fmt(fraction));
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < bags.size(); ++i) by_class[bags[i].label].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw InputError("class '" + std::string(label_name(label)) + "' has fewer than 2 bags");
    }
  }
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(bags.size())));
  struct Quota {
    int label;
    std::size_t count;
    double remainder;
    std::size_t size;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [label, members] : by_class) {
    const double exact = fraction * static_cast<double>(members.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({label, base, exact - static_cast<double>(base), members.size()});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    auto& q = quotas[order[k]];
    if (q.count + 1 < q.size) {
      q.count += 1;
      assigned += 1;
    }
  }

  Split s;
  Rng rng(derive_seed(seed, {stream_tag("split")}));
  for (const auto& q : quotas) {
    std::vector<std::size_t> members = by_class[q.label];
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t i = 0; i < members.size(); ++i) (i < q.count ? s.test : s.train).push_back(members[i]);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ---------------------------------------------------------------------------
// Simulated expert

struct Annotation {
  IndexSet roi;
  bool negative_confirmed = false;

  bool operator==(const Annotation&) const = default;
};

class Oracle {
 public:
  Oracle(GroundTruth truth, double reveal_fraction, std::uint64_t seed)
      : truth_(std::move(truth)), reveal_(reveal_fraction), seed_(seed) {
    if (!(reveal_ > 0.0 && reveal_ <= 1.0)) throw ParameterError("reveal fraction must lie in (0,1]");
  }

  /// Reveals ceil(reveal * |tumor|) tumor instances of a positive bag, drawn
  /// with a per-bag seeded stream; a negative bag is only confirmed negative.
  Annotation annotate(const FeatureBag& bag) const {
    if (bag.is_annotated()) throw ContractError("oracle: bag '" + bag.id + "' is already annotated");
    Annotation a;
    if (bag.label == kNegativeClass) {
      a.negative_confirmed = true;
      return a;
    }
    auto it = truth_.find(bag.id);
    if (it == truth_.end()) throw IntegrityError("oracle: no ground truth for bag '" + bag.id + "'");
    const IndexSet& tumor = it->second;
    if (tumor.empty()) return a;
    const auto k = std::min(tumor.size(), static_cast<std::size_t>(
                                              std::ceil(reveal_ * static_cast<double>(tumor.size()) - 1e-9)));
    Rng rng(derive_seed(seed_, {stream_tag("oracle"), fnv1a(bag.id)}));
    for (auto i : rng.sample_indices(tumor.size(), std::max<std::size_t>(k, 1))) a.roi.push_back(tumor[i]);
    std::sort(a.roi.begin(), a.roi.end());
    return a;
  }

  void apply(FeatureBag& bag) const {
    Annotation a = annotate(bag);
    bag.annotation = std::move(a.roi);
    bag.negative_confirmed = a.negative_confirmed;
  }

  const GroundTruth& truth() const { return truth_; }

 private:
  GroundTruth truth_;
  double reveal_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Evaluation and selection

struct Evaluation {
  MetricsRecord metrics;
  std::vector<int> predictions;
  Matrix probabilities;
};

inline Evaluation evaluate_model(const MilModel& model, std::span<const FeatureBag> bags, int threads = 1) {
  Evaluation e;
  e.predictions.resize(bags.size());
  e.probabilities.resize(static_cast<Eigen::Index>(bags.size()), model.architecture().num_classes);
  parallel_for(bags.size(), threads, [&](std::size_t i) {
    BagPrediction p = predict(model, bags[i].instances);
    e.predictions[i] = p.predicted;
    e.probabilities.row(static_cast<Eigen::Index>(i)) = p.probabilities;
  });
  std::vector<int> labels;
  for (const auto& b : bags) labels.push_back(b.label);
  e.metrics = compute_metrics(e.predictions, e.probabilities, labels);
  return e;
}

/// MC-dropout reports for a pool, U_att normalized over that pool.
/// `stream_seed(i)` gives the seed of bag i's inference stream.
template <typename SeedFn>
std::vector<UncertaintyReport> pool_reports(const MilModel& model, std::span<const FeatureBag* const> pool,
                                            int mc_samples, AttentionSource source, int threads,
                                            SeedFn&& stream_seed) {
  std::vector<UncertaintyReport> reports(pool.size());
  parallel_for(pool.size(), threads, [&](std::size_t i) {
    Rng rng(stream_seed(i));
    auto samples = mc_infer(model, pool[i]->instances, mc_samples, rng);
    reports[i] = make_report(pool[i]->id, pool[i]->label, samples, source);
  });
  normalize_uncertainties(reports);
  return reports;
}

/// Picks k bag ids from the pool: the k most relevant, or a uniform sample
/// without replacement (drawn over the pool sorted by id).
inline std::vector<std::string> select_query(std::span<UncertaintyReport> pool, Strategy strategy, std::size_t k,
                                             Rng& rng, const RelevanceCombiner& combine = default_relevance) {
  if (pool.size() < k) {
    throw InputError("select_query: pool of " + std::to_string(pool.size()) + " bags is smaller than k=" +
                     std::to_string(k));
  }
  if (strategy == Strategy::Uncertainty) {
    auto ranked = rank_pool(pool, combine);
    ranked.resize(k);
    return ranked;
  }
  std::vector<std::string> ids;
  for (const auto& r : pool) ids.push_back(r.bag_id);
  std::sort(ids.begin(), ids.end());
  std::vector<std::string> out;
  for (auto i : rng.sample_indices(ids.size(), k)) out.push_back(ids[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Run state

struct CycleRecord {
  int cycle = 0;
  std::size_t n_annotated = 0;  // annotations the model of this cycle was trained with
  MetricsRecord metrics;
  std::vector<std::string> queried;  // selected after this cycle's training

  bool operator==(const CycleRecord&) const = default;
};

struct ALState {
  std::string config_hash;
  std::string strategy;
  std::string variant;
  std::uint64_t run_seed = 0;
  int cycle = -1;  // last completed cycle
  // Annotated bags in annotation order, with the revealed RoI.
  std::vector<std::pair<std::string, Annotation>> annotated;
  std::vector<CycleRecord> history;

  std::set<std::string> annotated_ids() const {
    std::set<std::string> s;
    for (const auto& [id, a] : annotated) s.insert(id);
    return s;
  }
};

inline std::string encode_state(const ALState& s) {
  std::string out = "milal-alstate 1\n";
  out += "config_hash " + s.config_hash + "\n";
  out += "strategy " + s.strategy + "\n";
  out += "variant " + s.variant + "\n";
  out += "run_seed " + std::to_string(s.run_seed) + "\n";
  out += "cycle " + std::to_string(s.cycle) + "\n";
  for (const auto& [id, a] : s.annotated) {
    out += "annotated " + id + " " + (a.negative_confirmed ? "1" : "0") + " " + std::to_string(a.roi.size());
    for (auto i : a.roi) out += " " + std::to_string(i);
    out += "\n";
  }
  for (const auto& r : s.history) {
    out += "record " + std::to_string(r.cycle) + " " + std::to_string(r.n_annotated);
    for (double v : {r.metrics.accuracy, r.metrics.weighted_f1, r.metrics.auroc}) detail::put_hex(out, v);
    out += std::string(" ") + (r.metrics.missing_class ? "1" : "0") + " " + std::to_string(r.metrics.support.size());
    for (auto c : r.metrics.support) out += " " + std::to_string(c);
    out += " " + std::to_string(r.queried.size());
    for (const auto& q : r.queried) out += " " + q;
    out += "\n";
  }
  std::ostringstream h;
  h << std::hex << fnv1a(out);
  out += "checksum " + h.str() + "\n";
  return out;
}

inline ALState decode_state(const std::string& text) {
  const auto pos = text.rfind("checksum ");
  if (pos == std::string::npos) throw IntegrityError("AL state: missing checksum");
  {
    std::istringstream tail(text.substr(pos + 9));
    std::uint64_t stored = 0;
    tail >> std::hex >> stored;
    if (!tail || stored != fnv1a(std::string_view(text).substr(0, pos))) {
      throw IntegrityError("AL state: checksum mismatch");
    }
  }
  std::istringstream in(text.substr(0, pos));
  std::string line;
  if (!std::getline(in, line) || line != "milal-alstate 1") throw IntegrityError("AL state: bad header");
  ALState s;
  std::string tag;
  while (in >> tag) {
    if (tag == "config_hash") in >> s.config_hash;
    else if (tag == "strategy") in >> s.strategy;
    else if (tag == "variant") in >> s.variant;
    else if (tag == "run_seed") in >> s.run_seed;
    else if (tag == "cycle") in >> s.cycle;
    else if (tag == "annotated") {
      std::string id;
      int neg = 0;
      std::size_t n = 0;
      in >> id >> neg >> n;
      Annotation a;
      a.negative_confirmed = neg != 0;
      a.roi.resize(n);
      for (auto& i : a.roi) in >> i;
      s.annotated.emplace_back(id, std::move(a));
    } else if (tag == "record") {
      CycleRecord r;
      in >> r.cycle >> r.n_annotated;
      r.metrics.accuracy = detail::get_hex(in, "record");
      r.metrics.weighted_f1 = detail::get_hex(in, "record");
      r.metrics.auroc = detail::get_hex(in, "record");
      int missing = 0;
      std::size_t k = 0;
      in >> missing >> k;
      r.metrics.missing_class = missing != 0;
      r.metrics.support.resize(k);
      for (auto& c : r.metrics.support) in >> c;
      std::size_t nq = 0;
      in >> nq;
      r.queried.resize(nq);
      for (auto& q : r.queried) in >> q;
      s.history.push_back(std::move(r));
    } else {
      throw IntegrityError("AL state: unknown record '" + tag + "'");
    }
    if (!in) throw IntegrityError("AL state: truncated record '" + tag + "'");
  }
  return s;
}

inline void save_state(const ALState& s, const std::filesystem::path& path) {
  // Write-then-rename so a kill never leaves a torn state file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot write AL state '" + tmp + "'");
    f << encode_state(s);
  }
  std::filesystem::rename(tmp, path);
}

inline ALState load_state(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open AL state '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_state(ss.str());
}

// ---------------------------------------------------------------------------
// Active learning run

struct AlPersistence {
  std::optional<std::filesystem::path> state_path;
  bool resume = false;
  int stop_after_cycle = -1;  // stop (as if killed) once this cycle is persisted
};

struct AlOutcome {
  ALState state;
  bool completed = false;
};

namespace detail {

inline TrainedModel continue_training(TrainedModel t, std::span<const FeatureBag> bags, const TrainConfig& cfg,
                                      std::uint64_t seed) {
  TrainStreams streams(seed);
  const int start = t.epochs_done;
  for (int e = 0; e < cfg.epochs; ++e) {
    t.history.push_back(train_epoch(bags, t.model, t.adam, start + e, cfg, streams));
    t.epochs_done = start + e + 1;
  }
  return t;
}

}  // namespace detail

/// Runs (or resumes) one active learning run over `pool` (the training
/// split, oracle data stripped) and evaluates every cycle on `test`.
inline AlOutcome run_al(std::span<const FeatureBag> pool, std::span<const FeatureBag> test, const Oracle& oracle,
                        const RunConfig& cfg, Strategy strategy, std::uint64_t run_seed,
                        const AlPersistence& persist = {}) {
  cfg.validate();
  const auto& al = cfg.al;
  const auto source = al.attention_source == "weights" ? AttentionSource::Weights : AttentionSource::Logits;
  const auto combine = combiner_by_name(al.combiner);
  const bool warm = al.retrain == "continue";

  std::set<std::string> test_ids;
  for (const auto& b : test) test_ids.insert(b.id);
  std::map<std::string, std::size_t> pool_index;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (test_ids.count(pool[i].id)) throw IntegrityError("bag '" + pool[i].id + "' is in both pool and test split");
    pool_index[pool[i].id] = i;
  }
  if (pool.size() < static_cast<std::size_t>(al.cycles * al.queries_per_cycle)) {
    throw InputError("training pool too small for " + std::to_string(al.cycles) + " cycles of " +
                     std::to_string(al.queries_per_cycle) + " queries");
  }

  ALState state;
  state.config_hash = cfg.hash();
  state.strategy = strategy_name(strategy);
  state.variant = cfg.variant.name();
  state.run_seed = run_seed;
  std::optional<TrainedModel> previous;
  const auto ckpt_path = [&] { return std::filesystem::path(persist.state_path->string() + ".ckpt"); };

  if (persist.resume && persist.state_path && std::filesystem::exists(*persist.state_path)) {
    ALState loaded = load_state(*persist.state_path);
    if (loaded.config_hash != state.config_hash || loaded.strategy != state.strategy ||
        loaded.variant != state.variant || loaded.run_seed != state.run_seed) {
      throw IntegrityError("resume: state file '" + persist.state_path->string() +
                           "' was written with a different configuration");
    }
    state = std::move(loaded);
    if (warm && state.cycle >= 0) {
      Checkpoint ck = load_checkpoint(ckpt_path());
      previous = TrainedModel{std::move(ck.model), std::move(ck.adam), ck.epochs_done, {}};
    }
  }

  for (int t = state.cycle + 1; t <= al.cycles; ++t) {
    // Training set of this cycle: bag labels plus the annotations so far.
    std::vector<FeatureBag> bags(pool.begin(), pool.end());
    for (const auto& [id, a] : state.annotated) {
      auto it = pool_index.find(id);
      if (it == pool_index.end()) throw IntegrityError("annotated bag '" + id + "' is not in the training pool");
      bags[it->second].annotation = a.roi;
      bags[it->second].negative_confirmed = a.negative_confirmed;
    }
    const auto train_seed = derive_seed(run_seed, {stream_tag("cycle-train"), static_cast<std::uint64_t>(t)});
    TrainedModel trained = warm && previous
                               ? detail::continue_training(std::move(*previous), bags, cfg.train, train_seed)
                               : train_model(bags, cfg.model, cfg.variant, cfg.train, train_seed);

    CycleRecord rec;
    rec.cycle = t;
    rec.n_annotated = state.annotated.size();
    rec.metrics = evaluate_model(trained.model, test, cfg.threads).metrics;

    if (t < al.cycles) {
      const auto annotated = state.annotated_ids();
      std::vector<const FeatureBag*> candidates;
      std::vector<std::size_t> candidate_index;
      for (std::size_t i = 0; i < bags.size(); ++i) {
        if (!annotated.count(bags[i].id)) {
          candidates.push_back(&bags[i]);
          candidate_index.push_back(i);
        }
      }
      std::vector<UncertaintyReport> reports;
      if (strategy == Strategy::Uncertainty) {
        reports = pool_reports(trained.model, candidates, al.mc_samples, source, cfg.threads, [&](std::size_t i) {
          return derive_seed(run_seed, {stream_tag("mc"), static_cast<std::uint64_t>(t), candidate_index[i]});
        });
      } else {
        for (const auto* b : candidates) {
          UncertaintyReport r;
          r.bag_id = b->id;
          r.label = b->label;
          reports.push_back(std::move(r));
        }
      }
      Rng select_rng(derive_seed(run_seed, {stream_tag("select"), static_cast<std::uint64_t>(t)}));
      rec.queried = select_query(reports, strategy, static_cast<std::size_t>(al.queries_per_cycle), select_rng,
                                 combine);
      for (const auto& id : rec.queried) {
        if (test_ids.count(id)) throw IntegrityError("query selected test bag '" + id + "'");
        if (annotated.count(id)) throw IntegrityError("query selected annotated bag '" + id + "'");
        state.annotated.emplace_back(id, oracle.annotate(pool[pool_index.at(id)]));
      }
    }
    state.history.push_back(std::move(rec));
    state.cycle = t;
    if (persist.state_path) {
      if (warm) save_checkpoint(Checkpoint{cfg, trained.model, trained.adam, trained.epochs_done}, ckpt_path());
      save_state(state, *persist.state_path);
    }
    if (warm) previous = std::move(trained);
    if (t == persist.stop_after_cycle && t < al.cycles) return {std::move(state), false};
  }
  return {std::move(state), true};
}

// ---------------------------------------------------------------------------
// Ablation

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
};

inline MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

struct AblationRow {
  ModelVariant variant;
  std::vector<MetricsRecord> runs;
  MetricSummary accuracy, weighted_f1, auroc;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

inline std::uint64_t ablation_seed(std::uint64_t master, int run) {
  return derive_seed(master, {stream_tag("ablation"), static_cast<std::uint64_t>(run)});
}

/// Copies of the bags with every bag annotated by the oracle.
inline std::vector<FeatureBag> annotate_all(std::span<const FeatureBag> bags, const Oracle& oracle) {
  std::vector<FeatureBag> out(bags.begin(), bags.end());
  for (auto& b : out) {
    if (!b.is_annotated()) oracle.apply(b);
  }
  return out;
}

/// Trains every variant `n_runs` times on the fully annotated pool, with the
/// same seed list for every variant.
inline AblationResult run_ablation(std::span<const FeatureBag> pool, std::span<const FeatureBag> test,
                                   const Oracle& oracle, const RunConfig& cfg, int n_runs,
                                   const std::vector<ModelVariant>& variants = ModelVariant::all()) {
  if (n_runs < 2) throw ParameterError("ablation needs at least 2 runs");
  cfg.validate();
  AblationResult res;
  for (int r = 0; r < n_runs; ++r) res.seeds.push_back(ablation_seed(cfg.seed, r));
  const auto annotated = annotate_all(pool, oracle);
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v;
    for (int r = 0; r < n_runs; ++r) {
      auto trained = train_model(annotated, cfg.model, v, cfg.train, res.seeds[static_cast<std::size_t>(r)]);
      row.runs.push_back(evaluate_model(trained.model, test, cfg.threads).metrics);
    }
    std::vector<double> acc, f1, auc;
    for (const auto& m : row.runs) {
      acc.push_back(m.accuracy);
      f1.push_back(m.weighted_f1);
      auc.push_back(m.auroc);
    }
    row.accuracy = summarize(acc);
    row.weighted_f1 = summarize(f1);
    row.auroc = summarize(auc);
    res.rows.push_back(std::move(row));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Dataset preparation shared by the commands

struct PreparedData {
  std::vector<FeatureBag> pool;  // training split, oracle data stripped
  std::vector<FeatureBag> test;
  Oracle oracle;
};

inline PreparedData prepare_data(LoadedDataset loaded, const RunConfig& cfg) {
  Split split = stratified_split(loaded.bags, cfg.al.test_fraction, cfg.seed);
  PreparedData p{{}, {}, Oracle(std::move(loaded.truth), cfg.al.reveal_fraction,
                                derive_seed(cfg.seed, {stream_tag("expert")}))};
  for (auto i : split.train) p.pool.push_back(loaded.bags[i]);
  for (auto i : split.test) p.test.push_back(loaded.bags[i]);
  return p;
}

}  // namespace milal
