// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "milal/cli.hpp"
#include "support.hpp"

using namespace milal;
using milal::testing::random_bag;
using milal::testing::random_matrix;
using milal::testing::slurp;
using milal::testing::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int run_cli_quiet(std::vector<std::string> args) {
  args.insert(args.begin(), "milal");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  MilModel model(Architecture{}, ModelVariant::s_mil_agl(), 101);
  Rng data(202);
  FeatureBag bag = random_bag("g", 2, 5, 32, data);
  bag.annotation = IndexSet{1, 3};
  TrainConfig cfg;
  const char* names[] = {"mil", "sic", "agl+", "agl-", "total"};
  constexpr int kLosses = 5;

  // All five losses are built from one forward pass with a fixed dropout mask.
  auto build = [&](Graph& g) {
    Rng rng(303);
    ForwardResult fw = forward(g, model, bag.instances, Mode::Train, &rng);
    return std::array<Var, kLosses>{loss_mil(g, fw.bag_logits, bag.label),
                                    loss_sic(g, fw.instance_logits, bag.label),
                                    loss_agl_pos(g, fw.attention_logits, *bag.annotation),
                                    loss_agl_neg(g, fw.attention_logits, cfg.epsilon, kNegativeClass),
                                    total_loss(g, fw, bag, 3, cfg, model.variant()).total};
  };

  auto params = model.parameters();
  std::vector<const Parameter*> cparams(params.begin(), params.end());
  std::array<std::vector<Matrix>, kLosses> analytic;
  for (int k = 0; k < kLosses; ++k) {
    Graph g;
    auto losses = build(g);
    g.backward(losses[static_cast<std::size_t>(k)]);
    analytic[static_cast<std::size_t>(k)] = g.gradients(cparams);
  }
  auto values = [&] {
    Graph g;
    auto losses = build(g);
    std::array<double, kLosses> out{};
    for (int k = 0; k < kLosses; ++k) out[static_cast<std::size_t>(k)] = g.scalar(losses[static_cast<std::size_t>(k)]);
    return out;
  };

  const double h = 1e-5, floor = 1e-6;
  std::array<double, kLosses> worst{};
  std::size_t entries = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& value = params[p]->value;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double orig = value.data()[i];
      value.data()[i] = orig + h;
      const auto up = values();
      value.data()[i] = orig - h;
      const auto down = values();
      value.data()[i] = orig;
      for (std::size_t k = 0; k < kLosses; ++k) {
        const double numeric = (up[k] - down[k]) / (2.0 * h);
        const double a = analytic[k][p].data()[i];
        worst[k] = std::max(worst[k], std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
      }
      ++entries;
    }
  }
  const double elapsed = seconds_since(t0);
  v.detail << entries << " parameters;";
  for (int k = 0; k < kLosses; ++k) {
    v.detail << " " << names[k] << "=" << worst[static_cast<std::size_t>(k)];
    v.require(worst[static_cast<std::size_t>(k)] < 1e-4, std::string(names[k]) + " relative error");
  }
  v.detail << "; " << elapsed << " s";
  v.require(elapsed < 10.0, "runtime");
  return v;
}

Verdict loss_values() {
  Verdict v;
  Graph g;
  const double pos = g.scalar(loss_agl_pos(g, g.constant(Matrix::Zero(4, 1)), IndexSet{0, 2}));
  v.require(std::abs(pos - std::log(2.0)) <= 1e-9, "agl+ at zero logits");

  const double eps = TrainConfig{}.epsilon;
  const double at_min = std::log(eps / (1.0 - eps));
  const double entropy = -(eps * std::log(eps) + (1.0 - eps) * std::log(1.0 - eps));
  auto neg = [&](double a) {
    Graph gg;
    return gg.scalar(loss_agl_neg(gg, gg.constant(Matrix::Constant(3, 1, a)), eps, kNegativeClass));
  };
  const double minimum = neg(at_min);
  v.require(std::abs(minimum - entropy) <= 1e-6, "agl- minimum equals binary entropy");
  v.require(neg(at_min - 0.01) > minimum && neg(at_min + 0.01) > minimum, "agl- stationary point is a minimum");

  const double ce = g.scalar(loss_mil(g, g.constant(Matrix::Zero(1, 4)), 1));
  v.require(std::abs(ce - std::log(4.0)) <= 1e-9, "uniform cross-entropy");
  v.detail << "agl+=" << pos << " agl-min=" << minimum << " H(eps)=" << entropy << " ce=" << ce;
  return v;
}

Verdict annealing() {
  Verdict v;
  MilModel model(Architecture{}, ModelVariant::s_mil_agl(), 5);
  Rng data(6);
  FeatureBag bag = random_bag("a", 3, 7, 32, data);
  bag.annotation = IndexSet{0, 4};
  TrainConfig cfg;
  Graph g;
  Rng rng(7);
  ForwardResult fw = forward(g, model, bag.instances, Mode::Train, &rng);
  const LossBreakdown l = total_loss(g, fw, bag, 0, cfg, model.variant());
  v.require(l.total_value == l.sic, "epoch 0 total equals SIC loss");
  v.require(l.mil > 0.0 && l.agl > 0.0, "other terms present but weighted out");
  double prev = sic_weight(cfg.beta, 0);
  for (int e = 1; e <= 100; ++e) {
    const double w = sic_weight(cfg.beta, e);
    v.require(w < prev, "strictly decreasing at epoch " + std::to_string(e));
    prev = w;
  }
  const double w10 = sic_weight(cfg.beta, 10);
  v.require(w10 < 0.03, "beta^10 < 0.03");
  v.detail << "total(0)=" << l.total_value << " sic=" << l.sic << " beta^10=" << w10;
  return v;
}

Verdict attention_invariants() {
  Verdict v;
  MilModel model(Architecture{}, ModelVariant::s_mil_agl(), 8);
  Rng rng(9);
  double worst_sum = 0.0, worst_perm = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = static_cast<Eigen::Index>(1 + rng.below(60));
    const Matrix x = random_matrix(m, 32, rng, 1.0 + 3.0 * rng.uniform());
    const BagPrediction p = predict(model, x);
    worst_sum = std::max(worst_sum, std::abs(p.attention_weights.sum() - 1.0));

    std::vector<Eigen::Index> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    rng.shuffle(std::span<Eigen::Index>(perm));
    Matrix shuffled(m, 32);
    for (Eigen::Index i = 0; i < m; ++i) shuffled.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const BagPrediction q = predict(model, shuffled);
    worst_perm = std::max(worst_perm, (p.probabilities - q.probabilities).cwiseAbs().maxCoeff());
    if (p.predicted != q.predicted) worst_perm = std::max(worst_perm, 1.0);
  }
  v.require(worst_sum <= 1e-9, "softmax sums to 1");
  v.require(worst_perm <= 1e-9, "permutation invariance");
  v.detail << "max |sum-1|=" << worst_sum << " max perm diff=" << worst_perm;
  return v;
}

McSample logit_sample(std::vector<double> logits, int predicted) {
  McSample s;
  s.predicted = predicted;
  s.attention_logits = Eigen::Map<Eigen::VectorXd>(logits.data(), static_cast<Eigen::Index>(logits.size()));
  s.attention_weights = Eigen::VectorXd::Constant(s.attention_logits.size(), 1.0 / static_cast<double>(logits.size()));
  return s;
}

Verdict uncertainty_units() {
  Verdict v;
  Architecture arch;
  arch.dropout = 0.0;
  MilModel model(arch, ModelVariant::s_mil_agl(), 10);
  Rng data(11);
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(static_cast<std::uint64_t>(trial));
    const auto s = mc_infer(model, random_matrix(static_cast<Eigen::Index>(1 + data.below(30)), 32, data), 10, rng);
    v.require(attention_uncertainty(s) == 0.0, "dropout 0 gives U_att 0");
    const double u = classification_uncertainty(s, trial % kNumClasses);
    v.require(u == 0.0 || u == 1.0, "dropout 0 gives U_cls in {0,1}");
  }
  const std::vector<McSample> hand{logit_sample({0.0}, 0), logit_sample({2.0}, 0)};
  const double u_att = attention_uncertainty(hand);
  v.require(std::abs(u_att - 1.0) <= 1e-12, "hand case U_att = 1");
  for (int n = 1; n <= 12; ++n) {
    for (int k = 0; k <= n; ++k) {
      std::vector<McSample> s;
      for (int i = 0; i < n; ++i) s.push_back(logit_sample({0.0}, i < k ? 1 : 2));
      if (n >= 2) v.require(classification_uncertainty(s, 1) == static_cast<double>(k) / n, "agreement k/N");
    }
  }
  v.detail << "hand U_att=" << u_att;
  return v;
}

// Shared data for the benchmark criteria: default configuration end to end.
struct Benchmark {
  RunConfig cfg;
  PreparedData data;
};

Benchmark load_benchmark(const TempDir& dir) {
  const RunConfig cfg;
  const auto manifest = write_dataset(generate_dataset(cfg.generator()), cfg.generator(), dir.path());
  return Benchmark{cfg, prepare_data(load_dataset(manifest, true), cfg)};
}

Verdict ablation(const Benchmark& b) {
  Verdict v;
  const auto t0 = Clock::now();
  const auto res = run_ablation(b.data.pool, b.data.test, b.data.oracle, b.cfg, 10,
                                {ModelVariant::mil(), ModelVariant::s_mil_agl()});
  const auto& mil = res.rows[0].accuracy;
  const auto& best = res.rows[1].accuracy;
  v.require(best.mean >= mil.mean, "S-MIL-AGL mean >= MIL mean");
  v.require(best.std <= mil.std, "S-MIL-AGL std <= MIL std");
  const double elapsed = seconds_since(t0);
  v.require(elapsed < 1800.0, "runtime");
  v.detail << "MIL " << mil.mean << " +- " << mil.std << ", S-MIL-AGL " << best.mean << " +- " << best.std
           << "; " << elapsed << " s";
  return v;
}

Verdict attention_targeting(const Benchmark& b) {
  Verdict v;
  const auto pool = annotate_all(b.data.pool, b.data.oracle);
  const auto trained = train_model(pool, b.cfg.model, ModelVariant::s_mil_agl(), b.cfg.train,
                                   derive_seed(b.cfg.seed, {stream_tag("targeting")}));
  std::size_t positives = 0, hits = 0;
  for (const auto& bag : b.data.test) {
    if (bag.label == kNegativeClass) continue;
    const IndexSet& tumor = b.data.oracle.truth().at(bag.id);
    const BagPrediction p = predict(trained.model, bag.instances);
    double mass = 0.0;
    for (auto i : tumor) mass += p.attention_weights(static_cast<Eigen::Index>(i));
    const double uniform = static_cast<double>(tumor.size()) / static_cast<double>(bag.size());
    ++positives;
    hits += mass >= 2.0 * uniform ? 1 : 0;
  }
  const double frac = positives ? static_cast<double>(hits) / static_cast<double>(positives) : 0.0;
  v.require(positives > 0, "positive test bags exist");
  v.require(frac >= 0.8, "fraction >= 0.8");
  v.detail << hits << "/" << positives << " positive test bags (" << frac << ")";
  return v;
}

Verdict active_learning(const Benchmark& b) {
  Verdict v;
  const auto t0 = Clock::now();
  RunConfig cfg = b.cfg;
  v.require(cfg.al.repeats == 3 && cfg.al.cycles == 7 && cfg.al.queries_per_cycle == 2, "default schedule");
  double final_mean[2] = {0.0, 0.0};
  const Strategy strategies[2] = {Strategy::Uncertainty, Strategy::Random};
  for (int s = 0; s < 2; ++s) {
    for (int r = 0; r < cfg.al.repeats; ++r) {
      const auto res =
          run_al(b.data.pool, b.data.test, b.data.oracle, cfg, strategies[s], cli::repeat_seed(cfg.seed, r));
      final_mean[s] += res.state.history.back().metrics.accuracy / cfg.al.repeats;
    }
  }
  const double elapsed = seconds_since(t0);
  v.require(final_mean[0] >= final_mean[1] - 0.02, "uncertainty not worse than random by > 0.02");
  v.require(elapsed < 2700.0, "runtime");
  v.detail << "final accuracy uncertainty=" << final_mean[0] << " random=" << final_mean[1] << "; " << elapsed
           << " s";
  return v;
}

Verdict determinism_and_resume() {
  Verdict v;
  TempDir dir("acceptance-resume");
  std::ofstream(dir / "c.ini") << "[data]\nbags_per_class = 6\nmin_instances = 20\nmax_instances = 40\n"
                                  "[train]\nepochs = 3\n[al]\ncycles = 4\nrepeats = 1\nmc_samples = 4\n"
                                  "retrain = continue\n";
  const std::string cfg = (dir / "c.ini").string();
  const std::string manifest = (dir / "data/manifest.csv").string();
  v.require(run_cli_quiet({"gen-data", "--config", cfg, "--out", (dir / "data").string()}) == 0, "gen-data");
  for (const char* out : {"t1", "t2"}) {
    v.require(run_cli_quiet({"train", "--config", cfg, "--manifest", manifest, "--out", (dir / out).string()}) == 0,
              "train");
  }
  v.require(slurp(dir / "t1/metrics.csv") == slurp(dir / "t2/metrics.csv"), "identical metrics.csv");
  v.require(slurp(dir / "t1/model.ckpt") == slurp(dir / "t2/model.ckpt"), "identical checkpoint");

  v.require(run_cli_quiet({"al-run", "--config", cfg, "--manifest", manifest, "--out", (dir / "full").string()}) == 0,
            "al-run");
  const std::string reference = slurp(dir / "full/al_curve.csv");
  v.require(!reference.empty(), "reference curve written");
  int resumed = 0;
  for (int stop = 0; stop < 4; ++stop) {
    const std::string out = (dir / ("stop" + std::to_string(stop))).string();
    v.require(run_cli_quiet({"al-run", "--config", cfg, "--manifest", manifest, "--out", out, "--stop-after",
                             std::to_string(stop)}) == 0,
              "interrupted run");
    v.require(!std::filesystem::exists(out + "/al_curve.csv"), "no curve from an interrupted run");
    v.require(run_cli_quiet({"al-run", "--config", cfg, "--manifest", manifest, "--out", out, "--resume"}) == 0,
              "resumed run");
    const bool same = slurp(out + "/al_curve.csv") == reference;
    v.require(same, "resume after cycle " + std::to_string(stop) + " reproduces the curve");
    resumed += same ? 1 : 0;
  }
  v.detail << "metrics and checkpoint byte-identical; " << resumed << "/4 resume points identical";
  return v;
}

Verdict metrics_oracle() {
  Verdict v;
  const std::vector<double> s{0.9, 0.4, 0.4, 0.7, 0.1, 0.4};
  const bool pos[] = {true, true, false, false, false, true};
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  const double auc = binary_auroc(s, pos);
  v.require(std::abs(auc - wins / pairs) <= 1e-12, "AUROC equals pairwise count");

  // truth x prediction counts
  const int conf[3][3] = {{5, 1, 2}, {0, 3, 1}, {2, 0, 4}};
  std::vector<int> y, p;
  for (int t = 0; t < 3; ++t)
    for (int q = 0; q < 3; ++q)
      for (int k = 0; k < conf[t][q]; ++k) {
        y.push_back(t);
        p.push_back(q);
      }
  Matrix prob = Matrix::Zero(static_cast<Eigen::Index>(p.size()), 3);
  for (std::size_t i = 0; i < p.size(); ++i) prob(static_cast<Eigen::Index>(i), p[i]) = 1.0;
  const auto m = compute_metrics(p, prob, y);
  double expected = 0.0, total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double tp = conf[c][c], col = 0.0, row = 0.0;
    for (int o = 0; o < 3; ++o) {
      col += conf[o][c];
      row += conf[c][o];
    }
    const double precision = tp / col, recall = tp / row;
    expected += row * 2.0 * precision * recall / (precision + recall);
    total += row;
  }
  expected /= total;
  v.require(std::abs(m.weighted_f1 - expected) <= 1e-12, "weighted F1 equals direct computation");
  v.detail << "auroc=" << auc << " (pairs " << wins << "/" << pairs << ") weighted_f1=" << m.weighted_f1;
  return v;
}

Verdict format_round_trip() {
  Verdict v;
  TempDir dir("acceptance-format");
  Rng rng(12);
  int exact = 0, rejected = 0;
  for (int i = 0; i < 100; ++i) {
    FeatureBag b = random_bag("bag" + std::to_string(i), static_cast<int>(rng.below(4)),
                              static_cast<Eigen::Index>(1 + rng.below(50)), static_cast<Eigen::Index>(1 + rng.below(40)),
                              rng);
    b.instances *= std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    if (i % 3 == 0) b.instances(0, 0) = -0.0;
    if (i % 4 == 1) b.instances(0, 0) = std::numeric_limits<double>::denorm_min();
    if (b.label != kNegativeClass && rng.bernoulli(0.5)) b.annotation = IndexSet{0};
    if (b.label == kNegativeClass && rng.bernoulli(0.5)) b.negative_confirmed = true;
    if (rng.bernoulli(0.5)) b.tumor_indices = IndexSet{0};
    const auto path = dir / (b.id + ".milb");
    write_bag(b, path);
    const FeatureBag back = read_bag(path);
    bool same = back == b && back.instances.size() == b.instances.size();
    for (Eigen::Index k = 0; same && k < b.instances.size(); ++k) {
      same = std::bit_cast<std::uint64_t>(back.instances.data()[k]) == std::bit_cast<std::uint64_t>(b.instances.data()[k]);
    }
    exact += same ? 1 : 0;

    std::string bytes = slurp(path);
    bytes[static_cast<std::size_t>(rng.below(bytes.size()))] ^= static_cast<char>(1 + rng.below(255));
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    std::optional<FeatureBag> partial;
    try {
      partial = read_bag(path);
    } catch (const FormatError&) {
      ++rejected;
    }
    v.require(!partial.has_value(), "corrupted file rejected");
  }
  v.require(exact == 100, "bit-exact round trip");
  v.detail << exact << "/100 bit-exact, " << rejected << "/100 corruptions rejected";
  return v;
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& fn) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " [exception: " << e.what() << "]";
    }
    failures += v.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << " " << name << ": " << v.detail.str()
              << " (" << seconds_since(t0) << " s)" << std::endl;
  };

  report(1, "gradient correctness", gradients);
  report(2, "analytic loss values", loss_values);
  report(3, "annealing schedule", annealing);
  report(4, "attention invariants", attention_invariants);
  report(5, "uncertainty unit checks", uncertainty_units);

  TempDir dir("acceptance-benchmark");
  std::optional<Benchmark> bench;
  try {
    bench = load_benchmark(dir);
  } catch (const std::exception& e) {
    std::cout << "benchmark setup failed: " << e.what() << std::endl;
  }
  auto with_bench = [&](Verdict (*fn)(const Benchmark&)) {
    return [&, fn] {
      if (!bench) throw std::runtime_error("no benchmark data");
      return fn(*bench);
    };
  };
  report(6, "ablation ordering", with_bench(ablation));
  report(7, "attention targeting", with_bench(attention_targeting));
  report(8, "active learning benefit", with_bench(active_learning));
  report(9, "determinism and resume", determinism_and_resume);
  report(10, "metrics oracle", metrics_oracle);
  report(11, "format round trip", format_round_trip);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
