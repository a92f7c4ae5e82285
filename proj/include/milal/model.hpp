#pragma once

// Attention-based multiple instance classifier with an auxiliary
// single-instance classifier (SIC) branch and the attention guiding loss
// (AGL).
//
//   instances P (M x D)
//     -> embedding: 4 linear layers with leaky ReLU, batch norm after the
//        first, dropout after the second                      -> H (M x d4)
//     -> attention logits a = tanh(H V) w                     -> (M x 1)
//     -> attention weights alpha = softmax over instances
//     -> z = alpha^T H                                         -> (1 x d4)
//     -> bag classifier (2 linear layers)                      -> bag logits (1 x K)
//   SIC branch: H -> 3 linear layers                           -> instance logits (M x K)
//
// Objective for epoch E:
//   beta^E * L_SIC + (1 - beta^E) * (L_MIL + delta * L_AGL)

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milal/autodiff.hpp"
#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/random.hpp"

namespace milal {

struct ModelVariant {
  bool use_sic = true;
  bool use_agl = true;

  static ModelVariant mil() { return {false, false}; }
  static ModelVariant s_mil() { return {true, false}; }
  static ModelVariant mil_agl() { return {false, true}; }
  static ModelVariant s_mil_agl() { return {true, true}; }

  static std::vector<ModelVariant> all() { return {mil(), s_mil(), mil_agl(), s_mil_agl()}; }

  std::string name() const {
    if (use_sic) return use_agl ? "s-mil-agl" : "s-mil";
    return use_agl ? "mil-agl" : "mil";
  }

  static ModelVariant parse(const std::string& s) {
    for (const auto& v : all()) {
      if (v.name() == s) return v;
    }
    throw ConfigError("unknown variant '" + s + "' (expected mil, s-mil, mil-agl or s-mil-agl)");
  }

  bool operator==(const ModelVariant&) const = default;
};

struct Architecture {
  int input_dim = 32;
  std::vector<int> embedding{64, 64, 48, 32};
  int attention_hidden = 16;
  int classifier_hidden = 16;
  std::vector<int> sic_hidden{24, 16};
  int num_classes = kNumClasses;
  double dropout = 0.25;
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  int embedding_dim() const { return embedding.back(); }

  void validate() const {
    if (input_dim < 1) throw ParameterError("input_dim must be >= 1");
    if (embedding.size() != 4) throw ParameterError("embedding network needs exactly 4 layer widths");
    if (sic_hidden.size() != 2) throw ParameterError("SIC branch needs exactly 2 hidden widths");
    for (int w : embedding) {
      if (w < 1) throw ParameterError("layer widths must be >= 1");
    }
    for (int w : sic_hidden) {
      if (w < 1) throw ParameterError("layer widths must be >= 1");
    }
    if (attention_hidden < 1 || classifier_hidden < 1) throw ParameterError("layer widths must be >= 1");
    if (num_classes < 2) throw ParameterError("num_classes must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must lie in [0,1)");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ParameterError("bn_momentum must lie in (0,1]");
  }

  bool operator==(const Architecture&) const = default;
};

struct TrainConfig {
  double beta = 0.7;      // SIC annealing base
  double delta = 0.1;     // AGL weight
  double epsilon = 0.01;  // attention target on negative bags
  double lr = 5e-5;
  int epochs = 100;
  bool agl_negatives = true;         // AGL on negative bags without expert input
  bool roi_instance_targets = false; // SIC: unannotated instances of RoI bags target negative

  void validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw ParameterError("beta must lie in (0,1)");
    if (!(delta >= 0.0)) throw ParameterError("delta must be >= 0");
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw ParameterError("epsilon must lie in (0,0.5)");
    if (!(lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
    if (epochs < 0) throw ParameterError("epochs must be >= 0");
  }

  bool operator==(const TrainConfig&) const = default;
};

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Var apply(Graph& g, Var x) const { return g.add_bias(g.matmul(x, g.param(weight)), g.param(bias)); }
};

enum class Mode { Train, Eval, McDropout };

class MilModel {
 public:
  MilModel() = default;

  /// Fresh parameters. Initialization order is embedding, attention, bag
  /// classifier, SIC branch, so enabling SIC does not change the draws of
  /// the shared parameters.
  MilModel(Architecture arch, ModelVariant variant, std::uint64_t seed)
      : arch_(std::move(arch)), variant_(variant) {
    arch_.validate();
    Rng rng(seed);
    int in = arch_.input_dim;
    for (std::size_t i = 0; i < arch_.embedding.size(); ++i) {
      embedding_.push_back(make_linear("embed" + std::to_string(i), in, arch_.embedding[i], rng));
      in = arch_.embedding[i];
    }
    const int d1 = arch_.embedding.front();
    bn_gamma_ = Parameter{"bn.gamma", Matrix::Ones(1, d1)};
    bn_beta_ = Parameter{"bn.beta", Matrix::Zero(1, d1)};
    running_mean_ = RowVector::Zero(d1);
    running_var_ = RowVector::Ones(d1);

    const int d4 = arch_.embedding_dim();
    attention_v_ = Parameter{"attention.V", uniform_init(d4, arch_.attention_hidden, d4, rng)};
    attention_w_ = Parameter{"attention.w", uniform_init(arch_.attention_hidden, 1, arch_.attention_hidden, rng)};
    classifier_.push_back(make_linear("classifier0", d4, arch_.classifier_hidden, rng));
    classifier_.push_back(make_linear("classifier1", arch_.classifier_hidden, arch_.num_classes, rng));
    if (variant_.use_sic) {
      int w = d4;
      for (std::size_t i = 0; i < arch_.sic_hidden.size(); ++i) {
        sic_.push_back(make_linear("sic" + std::to_string(i), w, arch_.sic_hidden[i], rng));
        w = arch_.sic_hidden[i];
      }
      sic_.push_back(make_linear("sic2", w, arch_.num_classes, rng));
    }
  }

  const Architecture& architecture() const { return arch_; }
  const ModelVariant& variant() const { return variant_; }

  /// Learnable parameters in a fixed order (the optimizer state relies on it).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : embedding_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&bn_gamma_);
    out.push_back(&bn_beta_);
    out.push_back(&attention_v_);
    out.push_back(&attention_w_);
    for (auto& l : classifier_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (auto& l : sic_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<MilModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  const RowVector& running_mean() const { return running_mean_; }
  const RowVector& running_var() const { return running_var_; }
  void set_running_stats(RowVector mean, RowVector var) {
    if (mean.size() != running_mean_.size() || var.size() != running_var_.size()) {
      throw DimensionError("running statistics have the wrong width");
    }
    running_mean_ = std::move(mean);
    running_var_ = std::move(var);
  }

  /// Exponential update of the running statistics (unbiased variance).
  void update_running_stats(const BatchStats& s) {
    const double mom = arch_.bn_momentum;
    const double n = static_cast<double>(s.rows);
    running_mean_ = (1.0 - mom) * running_mean_ + mom * s.mean;
    running_var_ = (1.0 - mom) * running_var_ + mom * (s.var * (n / (n - 1.0)));
  }

  const std::vector<Linear>& embedding_layers() const { return embedding_; }
  const std::vector<Linear>& classifier_layers() const { return classifier_; }
  const std::vector<Linear>& sic_layers() const { return sic_; }
  const Parameter& bn_gamma() const { return bn_gamma_; }
  const Parameter& bn_beta() const { return bn_beta_; }
  const Parameter& attention_v() const { return attention_v_; }
  const Parameter& attention_w() const { return attention_w_; }

 private:
  static Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
  }
  static Linear make_linear(const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.weight = Parameter{name + ".weight", uniform_init(in, out, in, rng)};
    l.bias = Parameter{name + ".bias", uniform_init(1, out, in, rng)};
    return l;
  }

  Architecture arch_;
  ModelVariant variant_;
  std::vector<Linear> embedding_;
  Parameter bn_gamma_, bn_beta_;
  RowVector running_mean_, running_var_;
  Parameter attention_v_, attention_w_;
  std::vector<Linear> classifier_;
  std::vector<Linear> sic_;
};

/// Graph handles produced by one forward pass.
struct ForwardResult {
  Var embeddings;         // H, M x d4
  Var attention_logits;   // a, M x 1
  Var attention_weights;  // alpha, 1 x M
  Var bag_embedding;      // z, 1 x d4
  Var bag_logits;         // 1 x K
  std::optional<Var> instance_logits;  // M x K, SIC only
  std::optional<BatchStats> batch_stats;  // training mode with >= 2 instances
};

/// Builds the forward graph for one bag.
///
/// Train: dropout active, batch norm on the bag's own statistics (bags with a
/// single instance fall back to the running statistics).
/// Eval: no dropout, running statistics.
/// McDropout: dropout active, running statistics.
inline ForwardResult forward(Graph& g, const MilModel& model, const Matrix& instances, Mode mode,
                             Rng* rng) {
  const Architecture& arch = model.architecture();
  if (instances.rows() < 1) throw InputError("forward: empty bag");
  if (instances.cols() != arch.input_dim) {
    throw DimensionError("forward: bag has feature dim " + std::to_string(instances.cols()) +
                         ", model expects " + std::to_string(arch.input_dim));
  }
  const bool use_dropout = mode != Mode::Eval && arch.dropout > 0.0;
  if (use_dropout && rng == nullptr) throw ContractError("forward: dropout requires an rng");

  ForwardResult r;
  const auto& emb = model.embedding_layers();
  Var x = g.constant(instances);

  x = emb[0].apply(g, x);
  BatchStats stats;
  const bool batch_mode = mode == Mode::Train && instances.rows() >= 2;
  x = g.batch_norm(x, g.param(model.bn_gamma()), g.param(model.bn_beta()), model.running_mean(),
                   model.running_var(), arch.bn_eps, batch_mode ? &stats : nullptr);
  if (batch_mode) r.batch_stats = std::move(stats);
  x = g.leaky_relu(x, arch.leaky_slope);

  x = g.leaky_relu(emb[1].apply(g, x), arch.leaky_slope);
  if (use_dropout) {
    const Matrix& v = g.value(x);
    x = g.dropout(x, dropout_mask(v.rows(), v.cols(), arch.dropout, *rng));
  }
  x = g.leaky_relu(emb[2].apply(g, x), arch.leaky_slope);
  x = g.leaky_relu(emb[3].apply(g, x), arch.leaky_slope);
  r.embeddings = x;

  r.attention_logits =
      g.matmul(g.tanh(g.matmul(x, g.param(model.attention_v()))), g.param(model.attention_w()));
  r.attention_weights = g.row_softmax(g.transpose(r.attention_logits));
  r.bag_embedding = g.matmul(r.attention_weights, r.embeddings);

  const auto& cls = model.classifier_layers();
  Var c = g.leaky_relu(cls[0].apply(g, r.bag_embedding), arch.leaky_slope);
  r.bag_logits = cls[1].apply(g, c);

  if (model.variant().use_sic) {
    const auto& sic = model.sic_layers();
    Var s = r.embeddings;
    for (std::size_t i = 0; i + 1 < sic.size(); ++i) s = g.leaky_relu(sic[i].apply(g, s), arch.leaky_slope);
    r.instance_logits = sic.back().apply(g, s);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Loss terms

inline Var loss_mil(Graph& g, Var bag_logits, int label) {
  const int k = static_cast<int>(g.value(bag_logits).cols());
  if (label < 0 || label >= k) throw InputError("loss_mil: invalid label " + std::to_string(label));
  const int labels[1] = {label};
  return g.cross_entropy(bag_logits, labels);
}

/// Mean per-instance cross-entropy against per-instance targets.
inline Var loss_sic(Graph& g, const std::optional<Var>& instance_logits, std::span<const int> targets) {
  if (!instance_logits) throw ContractError("loss_sic: SIC branch is disabled");
  return g.cross_entropy(*instance_logits, targets);
}

inline Var loss_sic(Graph& g, const std::optional<Var>& instance_logits, int label) {
  if (!instance_logits) throw ContractError("loss_sic: SIC branch is disabled");
  std::vector<int> targets(static_cast<std::size_t>(g.value(*instance_logits).rows()), label);
  return loss_sic(g, instance_logits, targets);
}

/// Pushes sigmoid(a_k) towards 1 on the annotated instances k in Q.
inline Var loss_agl_pos(Graph& g, Var attention_logits, const IndexSet& roi) {
  if (roi.empty()) throw MissingAnnotation("loss_agl_pos: empty RoI");
  const auto m = g.value(attention_logits).rows();
  std::vector<int> rows;
  rows.reserve(roi.size());
  for (auto i : roi) {
    if (static_cast<Eigen::Index>(i) >= m) {
      throw InputError("loss_agl_pos: RoI index " + std::to_string(i) + " outside bag of " +
                       std::to_string(m));
    }
    rows.push_back(static_cast<int>(i));
  }
  Var picked = g.gather_rows(attention_logits, rows);
  return g.bce_with_logits(picked, Matrix::Ones(static_cast<Eigen::Index>(rows.size()), 1));
}

/// Pushes sigmoid(a_k) towards epsilon on every instance of a negative bag.
inline Var loss_agl_neg(Graph& g, Var attention_logits, double epsilon, int label) {
  if (label != kNegativeClass) throw ContractError("loss_agl_neg: bag is not negative");
  const auto m = g.value(attention_logits).rows();
  return g.bce_with_logits(attention_logits, Matrix::Constant(m, 1, epsilon));
}

struct LossBreakdown {
  Var total;
  double total_value = 0.0;
  double sic = 0.0;
  double mil = 0.0;
  double agl = 0.0;
  double sic_weight = 0.0;   // beta^E, 0 without SIC
  double main_weight = 1.0;  // 1 - beta^E, 1 without SIC
  bool agl_active = false;
};

inline double sic_weight(double beta, int epoch) { return std::pow(beta, epoch); }

/// The annealed objective for one bag. Terms that do not apply (SIC off,
/// AGL off, no RoI on a positive bag) contribute 0. Without the SIC branch
/// the MIL/AGL part carries the full weight.
inline LossBreakdown total_loss(Graph& g, const ForwardResult& fw, const FeatureBag& bag, int epoch,
                                const TrainConfig& cfg, const ModelVariant& variant) {
  if (epoch < 0) throw ContractError("total_loss: negative epoch");
  LossBreakdown out;
  Var mil = loss_mil(g, fw.bag_logits, bag.label);
  out.mil = g.scalar(mil);
  Var main = mil;

  if (variant.use_agl) {
    std::optional<Var> agl;
    if (bag.label == kNegativeClass) {
      if (cfg.agl_negatives || bag.negative_confirmed) {
        agl = loss_agl_neg(g, fw.attention_logits, cfg.epsilon, bag.label);
      }
    } else if (bag.has_roi()) {
      agl = loss_agl_pos(g, fw.attention_logits, *bag.annotation);
    }
    if (agl) {
      out.agl = g.scalar(*agl);
      out.agl_active = true;
      main = g.add(main, g.scale(*agl, cfg.delta));
    }
  }

  if (!variant.use_sic) {
    out.sic_weight = 0.0;
    out.main_weight = 1.0;
    out.total = main;
    out.total_value = g.scalar(main);
    return out;
  }

  Var sic;
  if (cfg.roi_instance_targets && bag.label != kNegativeClass && bag.has_roi()) {
    std::vector<int> targets(bag.size(), kNegativeClass);
    for (auto i : *bag.annotation) targets[i] = bag.label;
    sic = loss_sic(g, fw.instance_logits, targets);
  } else {
    sic = loss_sic(g, fw.instance_logits, bag.label);
  }
  out.sic = g.scalar(sic);
  out.sic_weight = sic_weight(cfg.beta, epoch);
  out.main_weight = 1.0 - out.sic_weight;
  out.total = g.add(g.scale(sic, out.sic_weight), g.scale(main, out.main_weight));
  out.total_value = g.scalar(out.total);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  int epoch = 0;
  double sic = 0.0;
  double mil = 0.0;
  double agl = 0.0;
  double total = 0.0;
  double sic_weight = 0.0;
  double main_weight = 0.0;
  std::size_t agl_bags = 0;  // bags on which an AGL term was active

  bool operator==(const EpochStats&) const = default;
};

/// Random streams of one training run.
struct TrainStreams {
  Rng shuffle;
  Rng dropout;

  explicit TrainStreams(std::uint64_t seed)
      : shuffle(derive_seed(seed, {stream_tag("shuffle")})),
        dropout(derive_seed(seed, {stream_tag("dropout")})) {}
};

/// One optimizer step on one bag. Returns the loss breakdown values.
inline LossBreakdown train_step(MilModel& model, AdamState& adam, const FeatureBag& bag, int epoch,
                                const TrainConfig& cfg, Rng& dropout_rng) {
  Graph g;
  ForwardResult fw = forward(g, model, bag.instances, Mode::Train, &dropout_rng);
  LossBreakdown loss = total_loss(g, fw, bag, epoch, cfg, model.variant());
  if (!std::isfinite(loss.total_value)) throw NumericError("non-finite loss on bag '" + bag.id + "'");
  g.backward(loss.total);
  auto params = model.parameters();
  std::vector<const Parameter*> cparams(params.begin(), params.end());
  const auto grads = g.gradients(cparams);
  adam.lr = cfg.lr;
  adam_step(params, grads, adam);
  if (fw.batch_stats) model.update_running_stats(*fw.batch_stats);
  return loss;
}

/// Visits every bag once in a seeded shuffled order, one optimizer step per
/// bag, and returns the per-term mean losses.
inline EpochStats train_epoch(std::span<const FeatureBag> dataset, MilModel& model, AdamState& adam,
                              int epoch, const TrainConfig& cfg, TrainStreams& streams) {
  if (dataset.empty()) throw InputError("train_epoch: empty dataset");
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  streams.shuffle.shuffle(std::span<std::size_t>(order));

  EpochStats s;
  s.epoch = epoch;
  for (std::size_t idx : order) {
    const FeatureBag& bag = dataset[idx];
    LossBreakdown l = train_step(model, adam, bag, epoch, cfg, streams.dropout);
    s.sic += l.sic;
    s.mil += l.mil;
    s.agl += l.agl;
    s.sic_weight = l.sic_weight;
    s.main_weight = l.main_weight;
    s.agl_bags += l.agl_active ? 1 : 0;
    s.total += l.total_value;
  }
  const double n = static_cast<double>(dataset.size());
  s.sic /= n;
  s.mil /= n;
  s.agl /= n;
  s.total /= n;
  return s;
}

struct TrainedModel {
  MilModel model;
  AdamState adam;
  int epochs_done = 0;
  std::vector<EpochStats> history;
};

/// Trains a fresh model for `cfg.epochs` epochs. Initialization, shuffling
/// and dropout draw from streams derived from `seed`.
inline TrainedModel train_model(std::span<const FeatureBag> dataset, const Architecture& arch,
                                const ModelVariant& variant, const TrainConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate();
  TrainedModel t{MilModel(arch, variant, derive_seed(seed, {stream_tag("init")})), AdamState{}, 0, {}};
  t.adam.lr = cfg.lr;
  TrainStreams streams(seed);
  for (int e = 0; e < cfg.epochs; ++e) {
    t.history.push_back(train_epoch(dataset, t.model, t.adam, e, cfg, streams));
    t.epochs_done = e + 1;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Inference

struct BagPrediction {
  int predicted = 0;
  RowVector probabilities;
  Matrix attention_logits;   // M x 1
  RowVector attention_weights;  // 1 x M
};

/// Deterministic prediction: dropout off, running statistics.
inline BagPrediction predict(const MilModel& model, const Matrix& instances) {
  Graph g;
  ForwardResult fw = forward(g, model, instances, Mode::Eval, nullptr);
  BagPrediction p;
  const Matrix& logits = g.value(fw.bag_logits);
  const double mx = logits.maxCoeff();
  p.probabilities = (logits.row(0).array() - mx).exp();
  p.probabilities /= p.probabilities.sum();
  Eigen::Index arg = 0;
  logits.row(0).maxCoeff(&arg);
  p.predicted = static_cast<int>(arg);
  p.attention_logits = g.value(fw.attention_logits);
  p.attention_weights = g.value(fw.attention_weights).row(0);
  return p;
}

}  // namespace milal
