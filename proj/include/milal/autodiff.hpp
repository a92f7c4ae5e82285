#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A `Graph` is a tape: every primitive appends one node holding its output
// value, the ids of its inputs and whatever it needs for the backward pass.
// Inputs always precede the node that consumes them, so the tape order is a
// topological order and `backward` is a single reverse sweep.
//
// Learnable tensors live outside the graph as `Parameter`s. `Graph::param`
// binds one into the tape as a leaf; after `backward`, `gradients()` returns
// one matrix per requested parameter (zero if it never entered the graph).

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "milal/error.hpp"
#include "milal/random.hpp"

namespace milal {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  AddBias,
  Add,
  LeakyRelu,
  Tanh,
  Sigmoid,
  RowSoftmax,
  Dropout,
  BatchNorm,
  CrossEntropy,
  BceWithLogits,
  GatherRows,
  Scale,
  Sum,
  Mean,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::AddBias: return "add_bias";
    case Op::Add: return "add";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::RowSoftmax: return "row_softmax";
    case Op::Dropout: return "dropout";
    case Op::BatchNorm: return "batch_norm";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::BceWithLogits: return "bce_with_logits";
    case Op::GatherRows: return "gather_rows";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
  }
  return "?";
}

/// Handle to a node of a `Graph`.
struct Var {
  std::uint32_t id = 0;
};

/// Batch statistics produced by a training-mode batch norm.
struct BatchStats {
  RowVector mean;
  RowVector var;  // biased (divides by the row count)
  std::size_t rows = 0;
};

namespace detail {

inline std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "(" << m.rows() << "x" << m.cols() << ")";
  return os.str();
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

class Graph {
 public:
  Graph() { nodes_.reserve(64); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  std::span<const int> inputs(Var v) const { return nodes_.at(v.id).in; }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw ContractError("Graph::scalar: node is " + detail::shape_str(m));
    return m(0, 0);
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last `backward` target w.r.t. this node (zeros if the
  /// node did not contribute).
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var constant(Matrix value) { return push(Op::Leaf, {}, std::move(value), false); }

  Var variable(Matrix value) { return push(Op::Leaf, {}, std::move(value), true); }

  /// Binds a parameter as a differentiable leaf; binding the same parameter
  /// twice returns the same node.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
    Var v = push(Op::Leaf, {}, p.value, true);
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.rows()) mismatch(Op::MatMul, A, B);
    Matrix out = A * B;
    return push(Op::MatMul, {a, b}, std::move(out));
  }

  Var transpose(Var a) { return push(Op::Transpose, {a}, value(a).transpose()); }

  Var add_bias(Var x, Var bias) {
    const Matrix& X = value(x);
    const Matrix& b = value(bias);
    if (b.rows() != 1 || b.cols() != X.cols()) mismatch(Op::AddBias, X, b);
    Matrix out = X.rowwise() + b.row(0);
    return push(Op::AddBias, {x, bias}, std::move(out));
  }

  Var add(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) mismatch(Op::Add, A, B);
    return push(Op::Add, {a, b}, A + B);
  }

  Var leaky_relu(Var x, double slope) {
    Matrix out = value(x).unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
    Var r = push(Op::LeakyRelu, {x}, std::move(out));
    nodes_[r.id].scalar = slope;
    return r;
  }

  Var tanh(Var x) {
    return push(Op::Tanh, {x}, value(x).unaryExpr([](double v) { return std::tanh(v); }));
  }

  Var sigmoid(Var x) {
    return push(Op::Sigmoid, {x}, value(x).unaryExpr([](double v) { return detail::sigmoid(v); }));
  }

  Var row_softmax(Var x) {
    const Matrix& X = value(x);
    Matrix out(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const double mx = X.row(r).maxCoeff();
      out.row(r) = (X.row(r).array() - mx).exp();
      out.row(r) /= out.row(r).sum();
    }
    return push(Op::RowSoftmax, {x}, std::move(out));
  }

  /// Multiplies by a precomputed (already scaled) dropout mask.
  Var dropout(Var x, Matrix mask) {
    const Matrix& X = value(x);
    if (mask.rows() != X.rows() || mask.cols() != X.cols()) mismatch(Op::Dropout, X, mask);
    Var r = push(Op::Dropout, {x}, X.cwiseProduct(mask));
    nodes_[r.id].aux = std::move(mask);
    return r;
  }

  /// Normalizes every column over the rows, then applies the affine
  /// `gamma * xhat + beta`. With `batch_stats` non-null the batch statistics
  /// are used and reported; otherwise `mean` and `var` are treated as fixed
  /// running statistics.
  Var batch_norm(Var x, Var gamma, Var beta, const RowVector& running_mean,
                 const RowVector& running_var, double eps, BatchStats* batch_stats) {
    const Matrix& X = value(x);
    const Matrix& G = value(gamma);
    const Matrix& B = value(beta);
    const auto n = X.cols();
    if (G.rows() != 1 || G.cols() != n || B.rows() != 1 || B.cols() != n ||
        running_mean.size() != n || running_var.size() != n) {
      mismatch(Op::BatchNorm, X, G);
    }
    const bool train = batch_stats != nullptr;
    RowVector mean, var;
    if (train) {
      if (X.rows() < 2) throw ContractError("batch_norm: training mode needs at least 2 rows");
      mean = X.colwise().mean();
      var = (X.rowwise() - mean).array().square().colwise().mean();
      batch_stats->mean = mean;
      batch_stats->var = var;
      batch_stats->rows = static_cast<std::size_t>(X.rows());
    } else {
      mean = running_mean;
      var = running_var;
    }
    RowVector inv_std = (var.array() + eps).rsqrt();
    Matrix xhat = (X.rowwise() - mean).array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
    Var r = push(Op::BatchNorm, {x, gamma, beta}, std::move(out));
    Node& node = nodes_[r.id];
    node.aux = std::move(xhat);
    node.aux2 = std::move(inv_std);
    node.flag = train;
    return r;
  }

  /// Mean over rows of softmax cross-entropy against integer labels.
  Var cross_entropy(Var logits, std::span<const int> labels) {
    const Matrix& L = value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != L.rows() || L.rows() == 0) {
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                           " labels for logits " + detail::shape_str(L));
    }
    Matrix probs(L.rows(), L.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      const int c = labels[static_cast<std::size_t>(r)];
      if (c < 0 || c >= L.cols()) {
        throw InputError("cross_entropy: label " + std::to_string(c) + " outside [0," +
                         std::to_string(L.cols()) + ")");
      }
      const double mx = L.row(r).maxCoeff();
      probs.row(r) = (L.row(r).array() - mx).exp();
      const double z = probs.row(r).sum();
      probs.row(r) /= z;
      total += mx + std::log(z) - L(r, c);
    }
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(L.rows());
    Var v = push(Op::CrossEntropy, {logits}, std::move(out));
    Node& node = nodes_[v.id];
    node.aux = std::move(probs);
    node.labels.assign(labels.begin(), labels.end());
    return v;
  }

  /// Mean binary cross-entropy between sigmoid(logits) and soft targets in
  /// [0, 1]. `logits` and `targets` are column vectors of equal length.
  Var bce_with_logits(Var logits, Matrix targets) {
    const Matrix& L = value(logits);
    if (L.cols() != 1 || targets.cols() != 1 || targets.rows() != L.rows() || L.rows() == 0) {
      mismatch(Op::BceWithLogits, L, targets);
    }
    double total = 0.0;
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      const double t = targets(r, 0);
      if (!(t >= 0.0 && t <= 1.0)) throw InputError("bce_with_logits: target outside [0,1]");
      total += detail::softplus(L(r, 0)) - t * L(r, 0);
    }
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(L.rows());
    Var v = push(Op::BceWithLogits, {logits}, std::move(out));
    nodes_[v.id].aux = std::move(targets);
    return v;
  }

  Var gather_rows(Var x, std::span<const int> rows) {
    const Matrix& X = value(x);
    Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= X.rows()) {
        throw InputError("gather_rows: index " + std::to_string(rows[i]) + " outside " +
                         detail::shape_str(X));
      }
      out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
    }
    Var v = push(Op::GatherRows, {x}, std::move(out));
    nodes_[v.id].labels.assign(rows.begin(), rows.end());
    return v;
  }

  Var scale(Var x, double c) {
    Var v = push(Op::Scale, {x}, value(x) * c);
    nodes_[v.id].scalar = c;
    return v;
  }

  Var sum(Var x) {
    Matrix out(1, 1);
    out(0, 0) = value(x).sum();
    return push(Op::Sum, {x}, std::move(out));
  }

  Var mean(Var x) {
    const Matrix& X = value(x);
    if (X.size() == 0) throw DimensionError("mean: empty tensor");
    Matrix out(1, 1);
    out(0, 0) = X.mean();
    return push(Op::Mean, {x}, std::move(out));
  }

  /// Reverse sweep from a scalar node. Gradients from earlier calls are
  /// discarded.
  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + detail::shape_str(root.value));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    root.grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      propagate(n);
    }
  }

  /// Gradients for the given parameters, same shapes, zero for parameters
  /// that were not bound into this graph.
  std::vector<Matrix> gradients(std::span<const Parameter* const> params) const {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const Parameter* p : params) {
      auto it = param_nodes_.find(p);
      if (it == param_nodes_.end()) {
        out.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      } else {
        out.push_back(grad(Var{it->second}));
      }
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> in;
    Matrix value;
    Matrix grad;
    Matrix aux;
    RowVector aux2;
    std::vector<int> labels;
    double scalar = 0.0;
    bool flag = false;
    bool requires_grad = false;
  };

  [[noreturn]] static void mismatch(Op op, const Matrix& a, const Matrix& b) {
    throw DimensionError(std::string(op_name(op)) + ": incompatible shapes " +
                         detail::shape_str(a) + " and " + detail::shape_str(b));
  }

  Var push(Op op, std::initializer_list<Var> inputs, Matrix value, bool leaf_grad = false) {
    Node n;
    n.op = op;
    n.requires_grad = leaf_grad;
    for (Var v : inputs) {
      n.in.push_back(static_cast<int>(v.id));
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Expr>
  void accumulate_expr(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Matrix& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  void propagate(const Node& n) {
    const Matrix& G = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        if (needs(n.in[0])) accumulate_expr(n.in[0], G * val(n.in[1]).transpose());
        if (needs(n.in[1])) accumulate_expr(n.in[1], val(n.in[0]).transpose() * G);
        break;
      case Op::Transpose:
        accumulate_expr(n.in[0], G.transpose());
        break;
      case Op::AddBias:
        accumulate(n.in[0], G);
        if (needs(n.in[1])) accumulate_expr(n.in[1], G.colwise().sum());
        break;
      case Op::Add:
        accumulate(n.in[0], G);
        accumulate(n.in[1], G);
        break;
      case Op::LeakyRelu: {
        const double slope = n.scalar;
        const Matrix& X = val(n.in[0]);
        accumulate_expr(n.in[0], G.binaryExpr(X, [slope](double g, double x) {
          return x > 0.0 ? g : slope * g;
        }));
        break;
      }
      case Op::Tanh:
        accumulate_expr(n.in[0], G.cwiseProduct((1.0 - n.value.array().square()).matrix()));
        break;
      case Op::Sigmoid:
        accumulate_expr(n.in[0],
                        G.cwiseProduct((n.value.array() * (1.0 - n.value.array())).matrix()));
        break;
      case Op::RowSoftmax: {
        const Matrix& Y = n.value;
        Matrix dx(Y.rows(), Y.cols());
        for (Eigen::Index r = 0; r < Y.rows(); ++r) {
          const double dot = G.row(r).dot(Y.row(r));
          dx.row(r) = Y.row(r).array() * (G.row(r).array() - dot);
        }
        accumulate(n.in[0], dx);
        break;
      }
      case Op::Dropout:
        accumulate_expr(n.in[0], G.cwiseProduct(n.aux));
        break;
      case Op::BatchNorm: {
        const Matrix& xhat = n.aux;
        const RowVector& inv_std = n.aux2;
        const Matrix& gamma = val(n.in[1]);
        if (needs(n.in[1])) accumulate_expr(n.in[1], G.cwiseProduct(xhat).colwise().sum());
        if (needs(n.in[2])) accumulate_expr(n.in[2], G.colwise().sum());
        if (needs(n.in[0])) {
          Matrix dxhat = G.array().rowwise() * gamma.row(0).array();
          if (n.flag) {
            const double m = static_cast<double>(xhat.rows());
            RowVector sum_d = dxhat.colwise().sum();
            RowVector sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
            Matrix dx = ((dxhat * m).rowwise() - sum_d).array() -
                        xhat.array().rowwise() * sum_dx.array();
            dx = dx.array().rowwise() * (inv_std.array() / m);
            accumulate(n.in[0], dx);
          } else {
            accumulate_expr(n.in[0], (dxhat.array().rowwise() * inv_std.array()).matrix());
          }
        }
        break;
      }
      case Op::CrossEntropy: {
        Matrix dx = n.aux;
        for (std::size_t r = 0; r < n.labels.size(); ++r) {
          dx(static_cast<Eigen::Index>(r), n.labels[r]) -= 1.0;
        }
        dx *= G(0, 0) / static_cast<double>(dx.rows());
        accumulate(n.in[0], dx);
        break;
      }
      case Op::BceWithLogits: {
        const Matrix& L = val(n.in[0]);
        Matrix dx(L.rows(), 1);
        const double s = G(0, 0) / static_cast<double>(L.rows());
        for (Eigen::Index r = 0; r < L.rows(); ++r) {
          dx(r, 0) = s * (detail::sigmoid(L(r, 0)) - n.aux(r, 0));
        }
        accumulate(n.in[0], dx);
        break;
      }
      case Op::GatherRows: {
        const Matrix& X = val(n.in[0]);
        Matrix dx = Matrix::Zero(X.rows(), X.cols());
        for (std::size_t i = 0; i < n.labels.size(); ++i) {
          dx.row(n.labels[i]) += G.row(static_cast<Eigen::Index>(i));
        }
        accumulate(n.in[0], dx);
        break;
      }
      case Op::Scale:
        accumulate_expr(n.in[0], G * n.scalar);
        break;
      case Op::Sum: {
        const Matrix& X = val(n.in[0]);
        accumulate_expr(n.in[0], Matrix::Constant(X.rows(), X.cols(), G(0, 0)));
        break;
      }
      case Op::Mean: {
        const Matrix& X = val(n.in[0]);
        accumulate_expr(n.in[0],
                        Matrix::Constant(X.rows(), X.cols(), G(0, 0) / static_cast<double>(X.size())));
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// 1/(1-rate).
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return Matrix::Ones(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  Matrix mask(rows, cols);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? 0.0 : keep;
  }
  return mask;
}

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<Parameter* const> params, std::span<const Matrix> grads,
                      AdamState& state) {
  if (params.size() != grads.size()) {
    throw ContractError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.empty()) {
    for (const Parameter* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = params[i]->value;
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols() ||
        state.first_moment[i].rows() != p.rows() || state.first_moment[i].cols() != p.cols()) {
      throw ContractError("adam_step: shape mismatch for parameter '" + params[i]->name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i]->value.array() -=
        state.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.eps);
  }
}

}  // namespace milal
