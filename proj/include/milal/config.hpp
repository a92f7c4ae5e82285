#pragma once

// Run configuration: one flat key space ("section.key") with defaults, an
// optional INI-style file and command-line overrides applied in that order.
//
//   [train]
//   lr = 5e-5
//   epochs = 100
//
// `to_entries()` lists every key in a fixed order; outputs echo it and the
// reproducibility hash is computed over it.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/model.hpp"
#include "milal/random.hpp"

namespace milal {

enum class Strategy { Uncertainty, Random };

inline std::string strategy_name(Strategy s) { return s == Strategy::Uncertainty ? "uncertainty" : "random"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "uncertainty") return Strategy::Uncertainty;
  if (s == "random") return Strategy::Random;
  throw ConfigError("unknown strategy '" + s + "' (expected uncertainty or random)");
}

struct AlConfig {
  std::string strategy = "both";  // uncertainty | random | both
  int cycles = 7;
  int queries_per_cycle = 2;
  int mc_samples = 10;
  double reveal_fraction = 0.5;
  int repeats = 3;
  double test_fraction = 0.34;
  int ablation_runs = 10;
  std::string combiner = "sum";
  std::string attention_source = "logits";  // logits | weights
  std::string retrain = "scratch";          // scratch | continue

  std::vector<Strategy> strategies() const {
    if (strategy == "both") return {Strategy::Uncertainty, Strategy::Random};
    return {parse_strategy(strategy)};
  }

  void validate() const {
    (void)strategies();
    if (cycles < 1) throw ConfigError("al.cycles must be >= 1");
    if (queries_per_cycle < 1) throw ConfigError("al.queries_per_cycle must be >= 1");
    if (mc_samples < 2) throw ConfigError("al.mc_samples must be >= 2");
    if (!(reveal_fraction > 0.0 && reveal_fraction <= 1.0)) throw ConfigError("al.reveal_fraction must lie in (0,1]");
    if (repeats < 1) throw ConfigError("al.repeats must be >= 1");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("al.test_fraction must lie in (0,1)");
    if (ablation_runs < 2) throw ConfigError("al.ablation_runs must be >= 2");
    if (attention_source != "logits" && attention_source != "weights") {
      throw ConfigError("al.attention_source must be logits or weights");
    }
    if (retrain != "scratch" && retrain != "continue") throw ConfigError("al.retrain must be scratch or continue");
  }
};

struct RunConfig {
  GeneratorConfig data;
  Architecture model;
  ModelVariant variant = ModelVariant::s_mil_agl();
  TrainConfig train;
  AlConfig al;
  std::uint64_t seed = 17;
  int threads = 1;

  void validate() const {
    try {
      GeneratorConfig g = data;
      g.seed = seed;
      g.validate();
      model.validate();
      train.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    al.validate();
    if (threads < 1) throw ConfigError("run.threads must be >= 1");
  }

  GeneratorConfig generator() const {
    GeneratorConfig g = data;
    g.seed = seed;
    return g;
  }

  std::vector<std::pair<std::string, std::string>> to_entries() const;
  void set(const std::string& key, const std::string& value);
  std::string canonical() const;
  std::string hash() const;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(const FractionRange& r) { return fmt(r.lo) + ":" + fmt(r.hi); }
inline std::string fmt(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto t = trim(v);
  auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto t = trim(v);
  auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto t = trim(v);
  auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("'" + key + "': expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + v + "'");
}

inline FractionRange parse_range(const std::string& key, const std::string& v) {
  const auto colon = v.find(':');
  if (colon == std::string::npos) throw ConfigError("'" + key + "': expected lo:hi, got '" + v + "'");
  return {parse_double(key, v.substr(0, colon)), parse_double(key, v.substr(colon + 1))};
}

inline std::vector<int> parse_widths(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, item)));
  return out;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> RunConfig::to_entries() const {
  using detail::fmt;
  return {
      {"run.seed", std::to_string(seed)},
      {"run.threads", fmt(threads)},
      {"data.bags_per_class", fmt(data.bags_per_class)},
      {"data.min_instances", fmt(data.min_instances)},
      {"data.max_instances", fmt(data.max_instances)},
      {"data.dim", fmt(data.dim)},
      {"data.frac_itc", fmt(data.tumor_fraction[1])},
      {"data.frac_micro", fmt(data.tumor_fraction[2])},
      {"data.frac_macro", fmt(data.tumor_fraction[3])},
      {"data.tumor_separation", fmt(data.tumor_separation)},
      {"data.distractor_separation", fmt(data.distractor_separation)},
      {"data.spread", fmt(data.spread)},
      {"data.distractor_clusters", fmt(data.distractor_clusters)},
      {"data.distractor_share", fmt(data.distractor_share)},
      {"model.variant", variant.name()},
      {"model.input_dim", fmt(model.input_dim)},
      {"model.embedding", fmt(model.embedding)},
      {"model.attention_hidden", fmt(model.attention_hidden)},
      {"model.classifier_hidden", fmt(model.classifier_hidden)},
      {"model.sic_hidden", fmt(model.sic_hidden)},
      {"model.dropout", fmt(model.dropout)},
      {"model.leaky_slope", fmt(model.leaky_slope)},
      {"model.bn_momentum", fmt(model.bn_momentum)},
      {"model.bn_eps", fmt(model.bn_eps)},
      {"train.beta", fmt(train.beta)},
      {"train.delta", fmt(train.delta)},
      {"train.epsilon", fmt(train.epsilon)},
      {"train.lr", fmt(train.lr)},
      {"train.epochs", fmt(train.epochs)},
      {"train.agl_negatives", fmt(train.agl_negatives)},
      {"train.roi_instance_targets", fmt(train.roi_instance_targets)},
      {"al.strategy", al.strategy},
      {"al.cycles", fmt(al.cycles)},
      {"al.queries_per_cycle", fmt(al.queries_per_cycle)},
      {"al.mc_samples", fmt(al.mc_samples)},
      {"al.reveal_fraction", fmt(al.reveal_fraction)},
      {"al.repeats", fmt(al.repeats)},
      {"al.test_fraction", fmt(al.test_fraction)},
      {"al.ablation_runs", fmt(al.ablation_runs)},
      {"al.combiner", al.combiner},
      {"al.attention_source", al.attention_source},
      {"al.retrain", al.retrain},
  };
}

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  auto as_int = [&] { return static_cast<int>(parse_int(key, v)); };
  auto as_double = [&] { return parse_double(key, v); };
  if (key == "run.seed") seed = parse_u64(key, v);
  else if (key == "run.threads") threads = as_int();
  else if (key == "data.bags_per_class") data.bags_per_class = as_int();
  else if (key == "data.min_instances") data.min_instances = as_int();
  else if (key == "data.max_instances") data.max_instances = as_int();
  else if (key == "data.dim") { data.dim = as_int(); model.input_dim = data.dim; }
  else if (key == "data.frac_itc") data.tumor_fraction[1] = parse_range(key, v);
  else if (key == "data.frac_micro") data.tumor_fraction[2] = parse_range(key, v);
  else if (key == "data.frac_macro") data.tumor_fraction[3] = parse_range(key, v);
  else if (key == "data.tumor_separation") data.tumor_separation = as_double();
  else if (key == "data.distractor_separation") data.distractor_separation = as_double();
  else if (key == "data.spread") data.spread = as_double();
  else if (key == "data.distractor_clusters") data.distractor_clusters = as_int();
  else if (key == "data.distractor_share") data.distractor_share = parse_range(key, v);
  else if (key == "model.variant") variant = ModelVariant::parse(v);
  else if (key == "model.input_dim") model.input_dim = as_int();
  else if (key == "model.embedding") model.embedding = parse_widths(key, v);
  else if (key == "model.attention_hidden") model.attention_hidden = as_int();
  else if (key == "model.classifier_hidden") model.classifier_hidden = as_int();
  else if (key == "model.sic_hidden") model.sic_hidden = parse_widths(key, v);
  else if (key == "model.dropout") model.dropout = as_double();
  else if (key == "model.leaky_slope") model.leaky_slope = as_double();
  else if (key == "model.bn_momentum") model.bn_momentum = as_double();
  else if (key == "model.bn_eps") model.bn_eps = as_double();
  else if (key == "train.beta") train.beta = as_double();
  else if (key == "train.delta") train.delta = as_double();
  else if (key == "train.epsilon") train.epsilon = as_double();
  else if (key == "train.lr") train.lr = as_double();
  else if (key == "train.epochs") train.epochs = as_int();
  else if (key == "train.agl_negatives") train.agl_negatives = parse_bool(key, v);
  else if (key == "train.roi_instance_targets") train.roi_instance_targets = parse_bool(key, v);
  else if (key == "al.strategy") {
    if (v != "both") (void)parse_strategy(v);
    al.strategy = v;
  }
  else if (key == "al.cycles") al.cycles = as_int();
  else if (key == "al.queries_per_cycle") al.queries_per_cycle = as_int();
  else if (key == "al.mc_samples") al.mc_samples = as_int();
  else if (key == "al.reveal_fraction") al.reveal_fraction = as_double();
  else if (key == "al.repeats") al.repeats = as_int();
  else if (key == "al.test_fraction") al.test_fraction = as_double();
  else if (key == "al.ablation_runs") al.ablation_runs = as_int();
  else if (key == "al.combiner") al.combiner = v;
  else if (key == "al.attention_source") al.attention_source = v;
  else if (key == "al.retrain") al.retrain = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Keys that do not influence results and are excluded from the hash.
inline bool is_operational_key(const std::string& key) { return key == "run.threads"; }

inline std::string RunConfig::canonical() const {
  std::string s;
  for (const auto& [k, v] : to_entries()) {
    if (is_operational_key(k)) continue;
    s += k + "=" + v + "\n";
  }
  return s;
}

inline std::string RunConfig::hash() const {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a(canonical());
  return os.str();
}

/// Applies an INI-style document: `[section]` headers, `key = value` lines,
/// `#` or `;` comments.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& source = "config") {
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source + ":" + std::to_string(line_no) + ": bad section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto full = section.empty() ? key : section + "." + key;
    try {
      cfg.set(full, value);
    } catch (const Error& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
  apply_config_text(cfg, f, path.string());
}

/// Entries formatted as an INI document, grouped by section.
inline std::string format_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& [k, v] : cfg.to_entries()) {
    const auto dot = k.find('.');
    const auto sec = k.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += k.substr(dot + 1) + " = " + v + "\n";
  }
  return out;
}

}  // namespace milal
