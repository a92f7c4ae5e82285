#pragma once

// Command-line front end. `run_cli` is the whole program minus `main`, so
// tests can drive it in-process.
//
// Exit codes: 0 success, 2 configuration error, 3 data integrity error,
// 4 numeric or internal error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "milal/active_learning.hpp"
#include "milal/bag_io.hpp"
#include "milal/checkpoint.hpp"
#include "milal/config.hpp"
#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/reports.hpp"

namespace milal {

namespace cli {

namespace fs = std::filesystem;

struct Options {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::string> strategy;
  std::optional<int> cycles;
  std::optional<int> queries;
  std::optional<int> mc_samples;
  std::optional<int> threads;
  std::optional<int> epochs;
  std::optional<int> runs;
  std::vector<std::string> overrides;
  std::string out;
  std::string manifest;
  std::string checkpoint;
  std::string bag;
  std::string state;
  bool resume = false;
  bool labels_only = false;
  int stop_after = -1;
};

/// defaults < config file < --set < dedicated flags
inline RunConfig effective_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_file.empty()) apply_config_file(cfg, o.config_file);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) cfg.set("run.seed", std::to_string(*o.seed));
  if (o.variant) cfg.set("model.variant", *o.variant);
  if (o.strategy) cfg.set("al.strategy", *o.strategy);
  if (o.cycles) cfg.set("al.cycles", std::to_string(*o.cycles));
  if (o.queries) cfg.set("al.queries_per_cycle", std::to_string(*o.queries));
  if (o.mc_samples) cfg.set("al.mc_samples", std::to_string(*o.mc_samples));
  if (o.threads) cfg.set("run.threads", std::to_string(*o.threads));
  if (o.epochs) cfg.set("train.epochs", std::to_string(*o.epochs));
  if (o.runs) cfg.set("al.ablation_runs", std::to_string(*o.runs));
  cfg.validate();
  return cfg;
}

inline fs::path output_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IntegrityError("cannot create output directory '" + o.out + "': " + ec.message());
  return o.out;
}

inline void emit(const CsvTable& t, const Options& o, std::ostream& out) {
  if (o.out.empty()) {
    out << t.str();
  } else {
    t.write(o.out);
  }
}

inline PreparedData load_prepared(const RunConfig& cfg, const Options& o) {
  if (o.manifest.empty()) throw ConfigError("--manifest is required");
  LoadedDataset ds = load_dataset(o.manifest, true);
  if (ds.bags.empty()) throw IntegrityError("manifest '" + o.manifest + "' lists no bags");
  if (static_cast<int>(ds.bags.front().dim()) != cfg.model.input_dim) {
    throw IntegrityError("dataset has feature dim " + std::to_string(ds.bags.front().dim()) +
                         " but model.input_dim is " + std::to_string(cfg.model.input_dim));
  }
  return prepare_data(std::move(ds), cfg);
}

inline Checkpoint load_model(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(o.checkpoint);
}

inline void check_dim(const MilModel& model, const FeatureBag& bag) {
  if (static_cast<int>(bag.dim()) != model.architecture().input_dim) {
    throw IntegrityError("bag '" + bag.id + "' has feature dim " + std::to_string(bag.dim()) +
                         ", checkpoint expects " + std::to_string(model.architecture().input_dim));
  }
}

inline int cmd_gen_data(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  const auto dir = output_dir(o);
  const GeneratorConfig gen = cfg.generator();
  SyntheticDataset ds = generate_dataset(gen);
  const auto manifest = write_dataset(ds, gen, dir);
  out << "wrote " << ds.bags.size() << " bags, manifest " << manifest.string() << ", oracle accuracy "
      << detail::fmt(ds.oracle_accuracy) << "\n";
  return 0;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  PreparedData data = load_prepared(cfg, o);
  const auto dir = output_dir(o);
  std::vector<FeatureBag> bags = o.labels_only ? data.pool : annotate_all(data.pool, data.oracle);
  TrainedModel t =
      train_model(bags, cfg.model, cfg.variant, cfg.train, derive_seed(cfg.seed, {stream_tag("train")}));
  const Evaluation ev = evaluate_model(t.model, data.test, cfg.threads);
  save_checkpoint(Checkpoint{cfg, t.model, t.adam, t.epochs_done}, dir / "model.ckpt");
  train_log_table(cfg, t.history).write(dir / "train_log.csv");
  metrics_table(cfg, ev.metrics, data.test.size()).write(dir / "metrics.csv");
  out << cfg.variant.name() << ": " << t.epochs_done << " epochs, test accuracy " << detail::fmt(ev.metrics.accuracy)
      << ", weighted F1 " << detail::fmt(ev.metrics.weighted_f1) << ", AUROC " << detail::fmt(ev.metrics.auroc)
      << "\n";
  return 0;
}

inline int cmd_ablation(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  PreparedData data = load_prepared(cfg, o);
  const auto dir = output_dir(o);
  const AblationResult res = run_ablation(data.pool, data.test, data.oracle, cfg, cfg.al.ablation_runs);
  ablation_table(cfg, res).write(dir / "ablation.csv");
  const std::string text = ablation_text(res);
  std::ofstream(dir / "ablation.txt", std::ios::trunc) << text;
  out << text;
  return 0;
}

inline std::uint64_t repeat_seed(std::uint64_t master, int repeat) {
  return derive_seed(master, {stream_tag("al-repeat"), static_cast<std::uint64_t>(repeat)});
}

inline int cmd_al_run(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  PreparedData data = load_prepared(cfg, o);
  const auto dir = output_dir(o);
  std::vector<ALState> runs;
  for (Strategy s : cfg.al.strategies()) {
    for (int r = 0; r < cfg.al.repeats; ++r) {
      AlPersistence persist;
      persist.state_path = dir / ("state-" + strategy_name(s) + "-" + std::to_string(r) + ".txt");
      persist.resume = o.resume;
      persist.stop_after_cycle = o.stop_after;
      AlOutcome res = run_al(data.pool, data.test, data.oracle, cfg, s, repeat_seed(cfg.seed, r), persist);
      if (!res.completed) {
        out << "stopped after cycle " << res.state.cycle << " (" << strategy_name(s) << ", repeat " << r
            << "); rerun with --resume to continue\n";
        return 0;
      }
      const auto& last = res.state.history.back();
      out << strategy_name(s) << " repeat " << r << ": " << last.n_annotated << " annotated, accuracy "
          << detail::fmt(last.metrics.accuracy) << "\n";
      runs.push_back(std::move(res.state));
    }
  }
  CsvTable curve = al_curve_table(cfg);
  for (const auto& s : runs) append_al_run(curve, s);
  curve.write(dir / "al_curve.csv");
  return 0;
}

inline int cmd_rank(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  const Checkpoint ck = load_model(o);
  if (o.manifest.empty()) throw ConfigError("--manifest is required");
  LoadedDataset ds = load_dataset(o.manifest, true);
  std::set<std::string> annotated;
  if (!o.state.empty()) annotated = load_state(o.state).annotated_ids();
  std::vector<const FeatureBag*> pool;
  for (const auto& b : ds.bags) {
    check_dim(ck.model, b);
    if (!b.is_annotated() && !annotated.count(b.id)) pool.push_back(&b);
  }
  auto reports = pool_reports(
      ck.model, pool, cfg.al.mc_samples, cfg.al.attention_source == "weights" ? AttentionSource::Weights
                                                                             : AttentionSource::Logits,
      cfg.threads, [&](std::size_t i) { return derive_seed(cfg.seed, {stream_tag("rank"), fnv1a(pool[i]->id)}); });
  const auto order = rank_pool(reports, combiner_by_name(cfg.al.combiner));
  std::map<std::string, const UncertaintyReport*> by_id;
  for (const auto& r : reports) by_id[r.bag_id] = &r;
  std::vector<UncertaintyReport> ranked;
  for (const auto& id : order) ranked.push_back(*by_id.at(id));
  emit(uncertainty_table(cfg, ranked), o, out);
  return 0;
}

inline int cmd_export_attention(const Options& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  const Checkpoint ck = load_model(o);
  if (o.bag.empty()) throw ConfigError("--bag is required");
  FeatureBag bag;
  try {
    bag = read_bag(o.bag, true);
  } catch (const FormatError& e) {
    throw IntegrityError(std::string("bag file '") + o.bag + "': " + e.what());
  }
  check_dim(ck.model, bag);
  Rng rng(derive_seed(cfg.seed, {stream_tag("export"), fnv1a(bag.id)}));
  const auto rows = patch_rows(ck.model, bag, cfg.al.mc_samples, rng);
  emit(attention_table(cfg, bag.id, rows), o, out);
  return 0;
}

inline void add_common(CLI::App* c, Options& o) {
  c->add_option("--config", o.config_file, "Config file (INI)");
  c->add_option("--seed", o.seed, "Master seed");
  c->add_option("--set", o.overrides, "Override a config key (section.key=value)");
  c->add_option("--threads", o.threads, "Inference threads");
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  cli::Options o;
  CLI::App app{"Attention MIL with attention guiding and uncertainty-driven active learning"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  cli::add_common(gen, o);
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one variant on the training split");
  cli::add_common(train, o);
  train->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_option("--variant", o.variant, "mil, s-mil, mil-agl or s-mil-agl");
  train->add_option("--epochs", o.epochs, "Training epochs");
  train->add_flag("--labels-only", o.labels_only, "Train without RoI annotations");

  auto* abl = app.add_subcommand("ablation", "Compare the four variants over seeded runs");
  cli::add_common(abl, o);
  abl->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  abl->add_option("--out", o.out, "Output directory")->required();
  abl->add_option("--runs", o.runs, "Runs per variant");
  abl->add_option("--epochs", o.epochs, "Training epochs");

  auto* al = app.add_subcommand("al-run", "Simulate active learning");
  cli::add_common(al, o);
  al->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  al->add_option("--out", o.out, "Output directory")->required();
  al->add_option("--variant", o.variant, "Model variant");
  al->add_option("--strategy", o.strategy, "uncertainty, random or both");
  al->add_option("--cycles", o.cycles, "Annotation cycles");
  al->add_option("--queries-per-cycle", o.queries, "Bags annotated per cycle");
  al->add_option("--mc-samples", o.mc_samples, "MC dropout inferences");
  al->add_option("--epochs", o.epochs, "Training epochs per cycle");
  al->add_flag("--resume", o.resume, "Continue from persisted run state");
  al->add_option("--stop-after", o.stop_after, "Stop once this cycle is persisted")->group("");

  auto* rank = app.add_subcommand("rank", "Rank unannotated bags by relevance");
  cli::add_common(rank, o);
  rank->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  rank->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  rank->add_option("--state", o.state, "Run state whose annotated bags are excluded");
  rank->add_option("--mc-samples", o.mc_samples, "MC dropout inferences");
  rank->add_option("--out", o.out, "Output file (default: stdout)");

  auto* exp = app.add_subcommand("export-attention", "Per-patch attention and uncertainty of one bag");
  cli::add_common(exp, o);
  exp->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  exp->add_option("--bag", o.bag, "Bag file")->required();
  exp->add_option("--mc-samples", o.mc_samples, "MC dropout inferences");
  exp->add_option("--out", o.out, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cli::cmd_gen_data(o, out);
    if (train->parsed()) return cli::cmd_train(o, out);
    if (abl->parsed()) return cli::cmd_ablation(o, out);
    if (al->parsed()) return cli::cmd_al_run(o, out);
    if (rank->parsed()) return cli::cmd_rank(o, out);
    if (exp->parsed()) return cli::cmd_export_attention(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}

}  // namespace milal
