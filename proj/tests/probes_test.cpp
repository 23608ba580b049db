// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "memdlm/probes.hpp"

namespace memdlm {
namespace {

const BasicFastWeights<double>* kNoFast = nullptr;

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_len = 40;
  c.init_std = 0.3;
  c.seed = 9;
  return c;
}

TaskSpec spec() {
  TaskSpec s;
  s.context_len = 24;
  s.n_pairs = 4;
  s.n_queries = 4;
  return s;
}

double row_ce(const BasicTensor<double>& z, std::size_t p, TokenId target) {
  double mx = -1e300, s = 0.0;
  for (std::size_t j = 0; j < z.dim(1); ++j) mx = std::max(mx, z.at(p, j));
  for (std::size_t j = 0; j < z.dim(1); ++j) s += std::exp(z.at(p, j) - mx);
  return std::log(s) + mx - z.at(p, std::size_t(target));
}

TEST(Static, ZeroHeadGivesLogVocab) {
  BasicModel<double> m = BasicModel<double>::init(small_model());
  for (auto& p : m.parameters())
    if (p.name == "head") p.tensor->fill(0.0);
  const auto pairs = gen_tasks(spec(), 6, 1, 1);
  for (double t : {0.2, 0.5, 1.0}) EXPECT_NEAR(static_loss(m, kNoFast, pairs, t, 3, 4), std::log(64.0), 1e-12);
}

TEST(Static, FullMaskIsResponseCrossEntropy) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  const auto pairs = gen_tasks(spec(), 5, 1, 1);
  double ref = 0.0;
  for (const auto& p : pairs) {
    Sequence x = p.prompt;
    x.resize(p.prompt.size() + p.response.size(), m.vocab().mask_id());
    const auto z = forward_logits(m, kNoFast, x);
    double s = 0.0;
    for (std::size_t j = 0; j < p.response.size(); ++j) s += row_ce(z, p.prompt.size() + j, p.response[j]);
    ref += s / double(p.response.size());
  }
  EXPECT_NEAR(static_loss(m, kNoFast, pairs, 1.0, 2, 0), ref / double(pairs.size()), 1e-12);
}

TEST(Static, MatchesBruteForceAverage) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  const auto pairs = gen_tasks(spec(), 4, 2, 1);
  const double t = 0.45;
  const std::uint64_t seed = 17;
  const std::size_t n = 5;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Sequence x0 = concat(pairs[i]);
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      Rng rng(derive_seed(seed, Stream::kProbe, i, s, std::uint64_t(std::llround(t * 1e6))));
      const auto st = forward_mask(x0, t, pairs[i].prompt.size(), m.vocab().mask_id(), rng);
      const auto z = forward_logits(m, kNoFast, st.tokens);
      double ce = 0.0;
      for (std::size_t p : st.masked) ce += row_ce(z, p, x0[p]);
      acc += ce / double(st.masked.size());
    }
    total += acc / double(n);
  }
  EXPECT_NEAR(static_loss(m, kNoFast, pairs, t, n, seed), total / double(pairs.size()), 1e-10);
}

TEST(Static, RejectsDegenerateInputs) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  const auto pairs = gen_tasks(spec(), 2, 1, 1);
  EXPECT_THROW(static_loss(m, kNoFast, {}, 0.5, 1, 0), DegenerateInputError);
  EXPECT_THROW(static_loss(m, kNoFast, pairs, 0.0, 1, 0), DegenerateInputError);
  EXPECT_THROW(static_loss(m, kNoFast, pairs, 0.5, 0, 0), ConfigError);
}

TEST(Sequential, FullyMaskedEndpointEqualsStatic) {
  const Model m = Model::init(small_model());
  const auto pairs = gen_tasks(spec(), 6, 3, 1);
  const SamplerConfig cfg{4};
  const auto* none = static_cast<const FastWeights*>(nullptr);
  EXPECT_EQ(sequential_loss(m, none, pairs, 1.0, cfg), static_loss(m, none, pairs, 1.0, 4, 0));
  const auto rep = exposure_report(m, none, pairs, default_exposure_grid(), 2, cfg, 0);
  ASSERT_EQ(rep.rows.size(), 10u);
  ASSERT_TRUE(rep.rows.front().r_eb);
  EXPECT_EQ(*rep.rows.front().r_eb, 1.0);
  EXPECT_EQ(rep.rows.front().n, 6u);
}

TEST(Sequential, StopsAtFloorOfMaskBudget) {
  const Model m = Model::init(small_model());
  const auto pairs = gen_tasks(spec(), 1, 3, 1);
  const SamplerConfig cfg{4};
  const auto* none = static_cast<const FastWeights*>(nullptr);
  EXPECT_EQ(sequential_state(m, none, pairs[0], 1.0, cfg).masked.size(), 4u);
  EXPECT_EQ(sequential_state(m, none, pairs[0], 0.75, cfg).masked.size(), 3u);
  EXPECT_EQ(sequential_state(m, none, pairs[0], 0.6, cfg).masked.size(), 2u);
  EXPECT_EQ(sequential_state(m, none, pairs[0], 0.1, cfg).masked.size(), 0u);
  EXPECT_FALSE(sequential_loss_per_pair(m, none, pairs, 0.1, cfg)[0]);
  EXPECT_THROW(sequential_loss(m, none, pairs, 0.1, cfg), DegenerateInputError);
  const auto rep = exposure_report(m, none, pairs, {1.0, 0.1}, 1, cfg, 0);
  EXPECT_FALSE(rep.rows.back().r_eb);
  EXPECT_EQ(exposure_csv(rep).substr(0, 21), "t,l_static,l_seq,r_eb");
  EXPECT_THROW(exposure_report(m, none, pairs, {0.5, 0.5}, 1, cfg, 0), ConfigError);
}

TEST(Retrieval, GoldAndConstantPredictors) {
  const auto pairs = gen_tasks(spec(), 400, 5, 1);
  const auto gold = retrieval_eval(pairs, [](const TaskPair& p, std::size_t) { return p.response; }, 1);
  EXPECT_EQ(overall_accuracy(gold), 1.0);
  const auto flat = retrieval_eval(
      pairs, [](const TaskPair& p, std::size_t) { return Sequence(p.response.size(), TokenId(20)); }, 1);
  const double n = 1600.0, p = 1.0 / 16.0;
  EXPECT_EQ(flat.at(24).total, 1600u);
  EXPECT_NEAR(overall_accuracy(flat), p, 3.29 * std::sqrt(p * (1 - p) / n));
}

TEST(Retrieval, ItemScoring) {
  const std::vector<TaskPair> pairs{{{1, 2, 3}, {20, 21, 22, 23}}, {{1, 2}, {20, 21}}};
  const std::vector<Sequence> pred{{20, 21, 0, 23}, {20}};
  const auto items = score_predictions(pairs, pred, 1);
  EXPECT_EQ(items.at(3).correct, 3u);
  EXPECT_EQ(items.at(3).total, 4u);
  EXPECT_EQ(items.at(2).correct, 1u);
  const auto whole = score_predictions(pairs, pred);
  EXPECT_EQ(whole.at(3).correct, 0u);
  EXPECT_EQ(whole.at(3).total, 1u);
  const auto halves = score_predictions(pairs, pred, 2);
  EXPECT_EQ(halves.at(3).correct, 1u);
  EXPECT_THROW(score_predictions(pairs, pred, 3), DimensionError);
  EXPECT_THROW(score_predictions(pairs, {pred[0]}), DimensionError);
}

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 1, 0, -3}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 1, 2, 2}), 4.0 / std::sqrt(20.0), 1e-12);
  EXPECT_EQ(spearman({1, 2, 3}, {5, 5, 5}), 0.0);
  EXPECT_THROW(spearman({1}, {1}), DimensionError);
}

}  // namespace
}  // namespace memdlm
