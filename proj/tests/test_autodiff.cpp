#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace milal;
using milal::testing::random_matrix;

namespace {

// Entry-wise relative error of d(loss)/d(x) against central differences,
// where `build` maps a variable holding x to a scalar.
double input_grad_error(const Matrix& x0, const std::function<Var(Graph&, Var)>& build, double h = 1e-6) {
  Graph g;
  Var xv = g.variable(x0);
  g.backward(build(g, xv));
  const Matrix analytic = g.grad(xv);
  double worst = 0.0;
  Matrix x = x0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    auto eval = [&](double v) {
      x.data()[i] = v;
      Graph gg;
      return gg.scalar(build(gg, gg.variable(x)));
    };
    const double numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
    x.data()[i] = orig;
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
  }
  return worst;
}

class PrimitiveGrad : public ::testing::Test {
 protected:
  Rng rng{42};
  // Fixed random weights make each scalar reduction non-trivial.
  Matrix weights = random_matrix(4, 3, rng);
  Var weighted_sum(Graph& g, Var y) { return g.sum(g.matmul(g.transpose(g.constant(weights)), y)); }
};

}  // namespace

TEST_F(PrimitiveGrad, MatMulBothSides) {
  const Matrix b = random_matrix(3, 2, rng);
  EXPECT_LT(input_grad_error(random_matrix(4, 3, rng), [&](Graph& g, Var x) {
              return g.sum(g.tanh(g.matmul(x, g.constant(b))));
            }),
            1e-6);
  const Matrix a = random_matrix(5, 4, rng);
  EXPECT_LT(input_grad_error(random_matrix(4, 3, rng), [&](Graph& g, Var x) {
              return g.sum(g.tanh(g.matmul(g.constant(a), x)));
            }),
            1e-6);
}

TEST_F(PrimitiveGrad, Elementwise) {
  const Matrix x = random_matrix(4, 3, rng);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.tanh(v)); }), 1e-6);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.sigmoid(v)); }), 1e-6);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.leaky_relu(v, 0.01)); }), 1e-6);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.scale(v, -2.5)); }), 1e-6);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return g.mean(g.tanh(v)); }), 1e-6);
}

TEST_F(PrimitiveGrad, BiasAddAndSoftmax) {
  const Matrix x = random_matrix(4, 3, rng);
  const Matrix bias = random_matrix(1, 3, rng);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) {
              return weighted_sum(g, g.tanh(g.add_bias(v, g.constant(bias))));
            }),
            1e-6);
  EXPECT_LT(input_grad_error(bias, [&](Graph& g, Var b) {
              return weighted_sum(g, g.tanh(g.add_bias(g.constant(x), b)));
            }),
            1e-6);
  // Row sums of a softmax are constant, so a linear readout would have zero gradient.
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.tanh(g.scale(g.row_softmax(v), 3.0))); }),
            1e-6);
  EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) { return weighted_sum(g, g.add(v, g.tanh(v))); }), 1e-6);
}

TEST_F(PrimitiveGrad, BatchNormTrainingAndFrozen) {
  const Matrix x = random_matrix(4, 3, rng);
  const Matrix gamma = random_matrix(1, 3, rng);
  const Matrix beta = random_matrix(1, 3, rng);
  const RowVector rm = RowVector::Constant(3, 0.2), rv = RowVector::Constant(3, 1.7);
  for (bool train : {true, false}) {
    auto bn = [&](Graph& g, Var xv, Var gv, Var bv) {
      BatchStats s;
      return g.batch_norm(xv, gv, bv, rm, rv, 1e-5, train ? &s : nullptr);
    };
    EXPECT_LT(input_grad_error(x, [&](Graph& g, Var v) {
                return weighted_sum(g, g.tanh(bn(g, v, g.constant(gamma), g.constant(beta))));
              }),
              1e-5)
        << "train=" << train;
    EXPECT_LT(input_grad_error(gamma, [&](Graph& g, Var v) {
                return weighted_sum(g, g.tanh(bn(g, g.constant(x), v, g.constant(beta))));
              }),
              1e-6);
    EXPECT_LT(input_grad_error(beta, [&](Graph& g, Var v) {
                return weighted_sum(g, g.tanh(bn(g, g.constant(x), g.constant(gamma), v)));
              }),
              1e-6);
  }
}

TEST_F(PrimitiveGrad, LossPrimitives) {
  const Matrix logits = random_matrix(5, 4, rng);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  EXPECT_LT(input_grad_error(logits, [&](Graph& g, Var v) { return g.cross_entropy(v, labels); }), 1e-6);
  const Matrix col = random_matrix(5, 1, rng, 3.0);
  Matrix targets(5, 1);
  targets << 0.0, 1.0, 0.3, 0.01, 1.0;
  EXPECT_LT(input_grad_error(col, [&](Graph& g, Var v) { return g.bce_with_logits(v, targets); }), 1e-6);
  const std::vector<int> rows{4, 0, 4};
  EXPECT_LT(input_grad_error(logits, [&](Graph& g, Var v) { return g.sum(g.tanh(g.gather_rows(v, rows))); }),
            1e-6);
}

TEST_F(PrimitiveGrad, DropoutScalesGradientByMask) {
  const Matrix x = random_matrix(4, 3, rng);
  Rng mask_rng(5);
  const Matrix mask = dropout_mask(4, 3, 0.5, mask_rng);
  Graph g;
  Var v = g.variable(x);
  g.backward(g.sum(g.dropout(v, mask)));
  EXPECT_TRUE(g.grad(v).isApprox(mask));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    EXPECT_TRUE(mask.data()[i] == 0.0 || mask.data()[i] == 2.0);
  }
}

TEST(Autodiff, SharedNodeAccumulatesGradient) {
  Graph g;
  Matrix x0(1, 1);
  x0 << 3.0;
  Var x = g.variable(x0);
  // f = x*x + x  ->  f' = 2x + 1
  Var f = g.sum(g.add(g.matmul(x, x), x));
  g.backward(f);
  EXPECT_DOUBLE_EQ(g.grad(x)(0, 0), 7.0);
}

TEST(Autodiff, ShapeErrorsNamePrimitiveAndShapes) {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3));
  Var b = g.constant(Matrix::Zero(2, 3));
  try {
    g.matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
  EXPECT_THROW(g.add(a, g.constant(Matrix::Zero(3, 2))), DimensionError);
}

TEST(Autodiff, BackwardNeedsScalar) {
  Graph g;
  Var a = g.variable(Matrix::Ones(2, 2));
  EXPECT_THROW(g.backward(a), ContractError);
}

TEST(Autodiff, UnboundParametersGetZeroGradient) {
  Parameter used{"used", Matrix::Ones(1, 1)};
  Parameter unused{"unused", Matrix::Ones(2, 2)};
  Graph g;
  g.backward(g.sum(g.scale(g.param(used), 3.0)));
  const Parameter* ps[] = {&used, &unused};
  auto grads = g.gradients(ps);
  EXPECT_DOUBLE_EQ(grads[0](0, 0), 3.0);
  EXPECT_TRUE(grads[1].isZero());
  EXPECT_EQ(grads[1].rows(), 2);
}

TEST(Autodiff, BceIsStableForLargeLogits) {
  Graph g;
  Matrix l(2, 1);
  l << 800.0, -800.0;
  Matrix t(2, 1);
  t << 1.0, 0.0;
  EXPECT_NEAR(g.scalar(g.bce_with_logits(g.constant(l), t)), 0.0, 1e-12);
}

TEST(Dropout, MaskRateBoundsAndIdentity) {
  Rng rng(1);
  EXPECT_TRUE(dropout_mask(3, 3, 0.0, rng).isOnes());
  EXPECT_THROW(dropout_mask(3, 3, 1.0, rng), ParameterError);
  EXPECT_THROW(dropout_mask(3, 3, -0.1, rng), ParameterError);
  const Matrix m = dropout_mask(200, 200, 0.25, rng);
  const double kept = (m.array() > 0.0).cast<double>().mean();
  EXPECT_NEAR(kept, 0.75, 0.01);
  EXPECT_NEAR(m.mean(), 1.0, 0.02);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps').
  Parameter p{"p", Matrix::Zero(1, 3)};
  Matrix g(1, 3);
  g << 2.0, -0.5, 0.0;
  AdamState s;
  s.lr = 0.1;
  Parameter* ps[] = {&p};
  const Matrix gs[] = {g};
  adam_step(ps, gs, s);
  EXPECT_NEAR(p.value(0, 0), -0.1, 1e-8);
  EXPECT_NEAR(p.value(0, 1), 0.1, 1e-8);
  EXPECT_EQ(p.value(0, 2), 0.0);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, MatchesReferenceRecurrence) {
  Parameter p{"p", Matrix::Constant(1, 1, 1.0)};
  AdamState s;
  s.lr = 0.01;
  double m = 0.0, v = 0.0, x = 1.0;
  for (int t = 1; t <= 5; ++t) {
    const double grad = 2.0 * x;  // d/dx x^2
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    x -= 0.01 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
    Parameter* ps[] = {&p};
    const Matrix gs[] = {Matrix::Constant(1, 1, 2.0 * p.value(0, 0))};
    adam_step(ps, gs, s);
  }
  EXPECT_NEAR(p.value(0, 0), x, 1e-14);
}

TEST(Adam, RejectsMismatchedInputs) {
  Parameter p{"p", Matrix::Zero(2, 2)};
  AdamState s;
  Parameter* ps[] = {&p};
  const Matrix wrong[] = {Matrix::Zero(1, 2)};
  EXPECT_THROW(adam_step(ps, wrong, s), ContractError);
  EXPECT_THROW(adam_step(ps, std::span<const Matrix>{}, s), ContractError);
}

TEST(Random, DerivedStreamsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(17, {stream_tag("a"), 1}), derive_seed(17, {stream_tag("a"), 1}));
  EXPECT_NE(derive_seed(17, {stream_tag("a"), 1}), derive_seed(17, {stream_tag("a"), 2}));
  EXPECT_NE(derive_seed(17, {stream_tag("a")}), derive_seed(18, {stream_tag("a")}));
  Rng a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Random, SampleIndicesDistinct) {
  Rng rng(3);
  auto idx = rng.sample_indices(20, 20);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
  EXPECT_THROW(rng.sample_indices(3, 4), ContractError);
}
