#include <gtest/gtest.h>

#include "support.hpp"

using namespace milal;
using milal::testing::random_matrix;

namespace {

McSample sample(std::vector<double> logits, int predicted) {
  McSample s;
  s.predicted = predicted;
  s.attention_logits = Eigen::Map<Eigen::VectorXd>(logits.data(), static_cast<Eigen::Index>(logits.size()));
  const double mx = s.attention_logits.maxCoeff();
  s.attention_weights = (s.attention_logits.array() - mx).exp();
  s.attention_weights /= s.attention_weights.sum();
  return s;
}

UncertaintyReport report(std::string id, double u_att_raw, double u_cls) {
  UncertaintyReport r;
  r.bag_id = std::move(id);
  r.u_att_raw = u_att_raw;
  r.u_cls = u_cls;
  return r;
}

}  // namespace

TEST(Uncertainty, SingleInstanceTwoInferences) {
  const std::vector<McSample> s{sample({0.0}, 0), sample({2.0}, 0)};
  EXPECT_NEAR(attention_uncertainty(s), 1.0, 1e-12);
}

TEST(Uncertainty, MeanOfPerPatchStd) {
  // patch 0: {1, 3} -> std 1; patch 1: {5, 5} -> std 0; patch 2: {0, 4} -> std 2
  const std::vector<McSample> s{sample({1, 5, 0}, 0), sample({3, 5, 4}, 0)};
  PatchStats p = patch_statistics(s);
  EXPECT_DOUBLE_EQ(p.std(0), 1.0);
  EXPECT_DOUBLE_EQ(p.std(1), 0.0);
  EXPECT_DOUBLE_EQ(p.std(2), 2.0);
  EXPECT_DOUBLE_EQ(p.mean(2), 2.0);
  EXPECT_DOUBLE_EQ(attention_uncertainty(s), 1.0);
}

TEST(Uncertainty, AgreementRateIsExactFraction) {
  std::vector<McSample> s;
  const int preds[] = {2, 2, 1, 2, 0, 2, 3};
  for (int p : preds) s.push_back(sample({0.0, 1.0}, p));
  EXPECT_EQ(classification_uncertainty(s, 2), 4.0 / 7.0);
  EXPECT_EQ(classification_uncertainty(s, 3), 1.0 / 7.0);
}

TEST(Uncertainty, RaggedOrTooFewSamplesRejected) {
  EXPECT_THROW(patch_statistics(std::vector<McSample>{sample({1.0}, 0)}), ContractError);
  EXPECT_THROW(patch_statistics(std::vector<McSample>{sample({1.0}, 0), sample({1.0, 2.0}, 0)}), ContractError);
  MilModel m(Architecture{}, ModelVariant::mil(), 1);
  Rng rng(1);
  EXPECT_THROW(mc_infer(m, Matrix::Zero(3, 32), 1, rng), ParameterError);
}

TEST(Uncertainty, ZeroDropoutGivesZeroAttentionUncertainty) {
  Architecture arch;
  arch.dropout = 0.0;
  MilModel m(arch, ModelVariant::s_mil_agl(), 3);
  Rng data(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix p = random_matrix(15, 32, data);
    Rng rng(9);
    auto s = mc_infer(m, p, 10, rng);
    EXPECT_EQ(attention_uncertainty(s), 0.0);
    const double u = classification_uncertainty(s, trial % 4);
    EXPECT_TRUE(u == 0.0 || u == 1.0);
  }
}

TEST(Uncertainty, McInferenceSeededAndConsumesStream) {
  MilModel m(Architecture{}, ModelVariant::s_mil_agl(), 3);
  Rng data(4);
  const Matrix p = random_matrix(12, 32, data);
  Rng a(5), b(5);
  auto sa = mc_infer(m, p, 4, a);
  auto sb = mc_infer(m, p, 4, b);
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].attention_logits, sb[i].attention_logits);
    EXPECT_EQ(sa[i].index, static_cast<int>(i) + 1);
  }
  EXPECT_NE(sa[0].attention_logits, sa[1].attention_logits);
  EXPECT_GT(attention_uncertainty(sa), 0.0);
}

TEST(Relevance, NormalizationAndRanking) {
  std::vector<UncertaintyReport> pool{report("a", 0.2, 1.0), report("b", 0.6, 0.5), report("c", 1.0, 0.0)};
  normalize_uncertainties(pool);
  EXPECT_DOUBLE_EQ(pool[0].u_att_norm, 0.0);
  EXPECT_DOUBLE_EQ(pool[1].u_att_norm, 0.5);
  EXPECT_DOUBLE_EQ(pool[2].u_att_norm, 1.0);
  const auto order = rank_pool(pool);
  EXPECT_EQ(order, (std::vector<std::string>{"c", "b", "a"}));
  EXPECT_DOUBLE_EQ(pool[2].relevance, 2.0);
  EXPECT_DOUBLE_EQ(pool[1].relevance, 1.0);
}

TEST(Relevance, DegeneratePoolAndTies) {
  std::vector<UncertaintyReport> pool{report("z", 0.3, 0.5), report("m", 0.3, 0.5), report("a", 0.3, 0.5)};
  normalize_uncertainties(pool);
  for (const auto& r : pool) EXPECT_EQ(r.u_att_norm, 0.0);
  EXPECT_EQ(rank_pool(pool), (std::vector<std::string>{"a", "m", "z"}));
}

TEST(Relevance, CombinersAreSwappable) {
  std::vector<UncertaintyReport> pool{report("a", 0.0, 0.0), report("b", 1.0, 1.0)};
  normalize_uncertainties(pool);
  EXPECT_EQ(rank_pool(pool, combiner_by_name("attention")).front(), "b");
  EXPECT_EQ(rank_pool(pool, combiner_by_name("class")).front(), "a");
  EXPECT_EQ(rank_pool(pool, combiner_by_name("sum")).front(), "a");  // tie 1 vs 1, id order
  EXPECT_THROW(combiner_by_name("product"), ConfigError);
}

TEST(Relevance, ReportFromSamples) {
  const std::vector<McSample> s{sample({0.0, 1.0}, 1), sample({2.0, 1.0}, 0)};
  const auto r = make_report("bag", 1, s);
  EXPECT_EQ(r.u_cls, 0.5);
  EXPECT_DOUBLE_EQ(r.u_att_raw, 0.5);
  EXPECT_EQ(r.mean_attention.size(), 2);
  const auto w = make_report("bag", 1, s, AttentionSource::Weights);
  EXPECT_GT(w.u_att_raw, 0.0);
  EXPECT_LT(w.u_att_raw, 0.5);
}
