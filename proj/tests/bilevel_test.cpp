// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "memdlm/bilevel.hpp"

namespace memdlm {
namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_len = 16;
  c.init_std = 0.3;
  c.seed = 5;
  return c;
}

std::vector<Anchor> make_batch(std::size_t n, double t, Rng& rng, TokenId mask = 8) {
  std::vector<Anchor> out;
  for (std::size_t b = 0; b < n; ++b) {
    Anchor a;
    a.x0.resize(12);
    for (auto& v : a.x0) v = TokenId(rng.uniform_int(8));
    a.state = forward_mask(a.x0, t, 3, mask, rng);
    out.push_back(std::move(a));
  }
  return out;
}

double max_abs_diff(const std::vector<BasicTensor<double>>& a, const std::vector<BasicTensor<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

std::vector<BasicTensor<double>> values(BasicFastWeights<double>& f) {
  std::vector<BasicTensor<double>> out;
  for (auto* p : f.params()) out.push_back(*p);
  return out;
}

BasicTensor<double> vec(std::vector<double> v) {
  BasicTensor<double> t({v.size()});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

TEST(Normalize, LocalScalesEachTensor) {
  std::vector<BasicTensor<double>> g{vec({3, 4}), vec({0, 0, 2})};
  normalize_gradients(g, GradNorm::kLocal, std::nullopt);
  EXPECT_NEAR(g[0][0], 0.6, 1e-12);
  EXPECT_NEAR(g[0][1], 0.8, 1e-12);
  EXPECT_NEAR(g[1][2], 1.0, 1e-12);
  std::vector<BasicTensor<double>> h{vec({3, 4})};
  normalize_gradients(h, GradNorm::kLocal, 0.5);
  EXPECT_NEAR(h[0][0], 0.3, 1e-12);
  EXPECT_NEAR(h[0][1], 0.4, 1e-12);
}

TEST(Normalize, GlobalAndOff) {
  std::vector<BasicTensor<double>> g{vec({3}), vec({4})};
  normalize_gradients(g, GradNorm::kGlobal, std::nullopt);
  EXPECT_NEAR(g[0][0], 0.6, 1e-12);
  EXPECT_NEAR(g[1][0], 0.8, 1e-12);
  std::vector<BasicTensor<double>> h{vec({3}), vec({4})};
  normalize_gradients(h, GradNorm::kOff, std::nullopt);
  EXPECT_EQ(h[0][0], 3.0);
  normalize_gradients(h, GradNorm::kOff, 1.0);
  EXPECT_NEAR(h[1][0], 0.8, 1e-12);
  std::vector<BasicTensor<double>> z{vec({0, 0})};
  normalize_gradients(z, GradNorm::kLocal, 1.0);
  EXPECT_TRUE(z[0].all_zero());
}

TEST(Stage1, PositionsAndEmptyLoss) {
  const Sequence x0{1, 2, 3, 4, 5, 6};
  const auto pre = make_state(Sequence{1, 2, 8, 8, 8, 6}, 1, 0.6, 8);
  const auto next = make_state(Sequence{1, 2, 8, 4, 8, 6}, 1, 0.4, 8);
  EXPECT_EQ(stage1_positions(pre, next, Stage1Target::kBroadClean), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(stage1_positions(pre, next, Stage1Target::kAnchorTokenOnly), (std::vector<std::size_t>{3}));
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  ModelGraph<double> g(m, nullptr, {});
  EXPECT_EQ(stage1_loss(g, pre, pre, x0, Stage1Target::kAnchorTokenOnly).item(), 0.0);
}

TEST(Stage1, BroadCleanDecomposesOverPositions) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  const Sequence x0{1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4};
  const auto pre = make_state(Sequence{1, 2, 3, 8, 8, 6, 8, 8, 1, 8, 3, 8}, 3, 0.6, 8);
  const auto next = make_state(Sequence{1, 2, 3, 4, 8, 6, 8, 0, 1, 8, 3, 4}, 3, 0.3, 8);
  ModelGraph<double> g(m, nullptr, {});
  const double loss = stage1_loss(g, pre, next, x0, Stage1Target::kBroadClean).item();
  const auto z = forward_logits(m, static_cast<const BasicFastWeights<double>*>(nullptr), pre.tokens);
  double ref = 0.0;
  for (std::size_t p : pre.masked) {
    double mx = -1e300, s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mx = std::max(mx, z.at(p, j));
    for (std::size_t j = 0; j < 8; ++j) s += std::exp(z.at(p, j) - mx);
    ref += std::log(s) + mx - z.at(p, std::size_t(x0[p]));
  }
  EXPECT_NEAR(loss, ref, 1e-10);
  const auto none = make_state(x0, 3, 0.0, 8);
  ModelGraph<double> g2(m, nullptr, {});
  EXPECT_EQ(stage1_loss(g2, none, none, x0, Stage1Target::kBroadClean).item(), 0.0);
}

TEST(Stage2, IdentityTeacherGivesZeroDistillation) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  Rng rng(1);
  const auto batch = make_batch(1, 0.5, rng);
  const auto teacher = make_identity_teacher(m, static_cast<const BasicFastWeights<double>*>(nullptr),
                                             batch[0].state);
  for (Supervision s : {Supervision::kKlDistill, Supervision::kReverseKlDistill, Supervision::kHiddenCosine,
                        Supervision::kHiddenMse}) {
    ModelGraph<double> g(m, nullptr, {});
    EXPECT_NEAR(stage2_loss(g, batch[0].state, batch[0].x0, s, &teacher).item(), 0.0, 1e-12);
  }
  ModelGraph<double> g(m, nullptr, {});
  EXPECT_THROW(stage2_loss(g, batch[0].state, batch[0].x0, Supervision::kKlDistill,
                           static_cast<const Teacher<double>*>(nullptr)), Error);
}

TEST(Stage2, CrossEntropyIsMaskedCe) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  Rng rng(2);
  const auto batch = make_batch(1, 0.5, rng);
  ModelGraph<double> g(m, nullptr, {});
  const double a = stage2_loss(g, batch[0].state, batch[0].x0, Supervision::kCrossEntropy,
                             static_cast<const Teacher<double>*>(nullptr)).item();
  Tape<double> tape(false);
  const auto z = tape.leaf(
      forward_logits(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch[0].state.tokens), false);
  EXPECT_NEAR(a, cross_entropy_masked(z, batch[0].x0, batch[0].state.masked).item(), 1e-12);
}

TEST(Stage2, TeacherRevealsAhead) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  Rng rng(3);
  const auto batch = make_batch(1, 1.0, rng);
  const auto t = make_teacher(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch[0].state, 0.25);
  EXPECT_EQ(t.state.masked.size(), 9u - 3u);
  EXPECT_TRUE(std::includes(batch[0].state.masked.begin(), batch[0].state.masked.end(), t.state.masked.begin(),
                            t.state.masked.end()));
}

TEST(InnerLoop, ZeroStepSizeKeepsInitialWeights) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  InnerLoopConfig cfg;
  cfg.eta = 0.0;
  auto fast = BasicFastWeights<double>::create(mc, cfg.scope);
  const auto init = values(fast);
  Rng rng(4);
  const auto batch = make_batch(3, 0.5, rng);
  auto res = inner_adapt(m, fast, batch, cfg, rng);
  EXPECT_EQ(max_abs_diff(values(res.fast), init), 0.0);
  const NoiseSchedule sch;
  EXPECT_EQ(outer_loss_value(m, &res.fast, batch, sch),
            outer_loss_value(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch, sch));
}

TEST(InnerLoop, AnchorStageDescends) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  InnerLoopConfig cfg;
  cfg.eta = 0.01;
  cfg.k = 1;
  auto fast0 = BasicFastWeights<double>::create(mc, cfg.scope);
  Rng rng(5);
  int violations = 0;
  const int trials = 20;
  for (int b = 0; b < trials; ++b) {
    const auto batch = make_batch(4, rng.uniform(0.2, 1.0), rng);
    auto res = inner_adapt(m, fast0, batch, cfg, rng);
    const auto after = inner_stage_gradients(m, res.fast, res.plan.back(), batch, cfg);
    if (after.loss > res.stages.back().loss) ++violations;
  }
  EXPECT_LE(violations, 1);
}

TEST(InnerLoop, TwoStageMatchesHandUnrolled) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  InnerLoopConfig cfg;
  cfg.eta = 0.1;
  cfg.k = 2;
  auto fast0 = BasicFastWeights<double>::create(mc, cfg.scope);
  Rng rng(6);
  const auto batch = make_batch(1, 0.4, rng);
  Rng r1(7), r2(7);
  auto res = inner_adapt(m, fast0, batch, cfg, r1);
  ASSERT_EQ(res.plan.size(), 2u);

  const NoisyState pre = further_mask(batch[0].state, pre_anchor_ratio(batch[0].state.mask_ratio(), cfg.s_pre),
                                      8, r2);
  EXPECT_EQ(pre, res.plan[0].input[0]);
  auto ref = fast0;
  auto step = [&](auto loss_fn) {
    ModelGraph<double> g(m, &ref, {.base = false, .fast = true});
    auto loss = loss_fn(g);
    g.backward(loss);
    auto grads = g.fast_grads();
    for (auto& t : grads) {
      double n = 0.0;
      for (double v : t.data()) n += v * v;
      n = std::sqrt(n);
      for (double& v : t.data()) v /= std::max(n, 1e-12);
    }
    auto params = ref.params();
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t j = 0; j < params[p]->size(); ++j) (*params[p])[j] -= 0.1 * grads[p][j];
  };
  step([&](ModelGraph<double>& g) { return cross_entropy_masked(g.run(pre.tokens).logits, batch[0].x0, pre.masked); });
  step([&](ModelGraph<double>& g) {
    return cross_entropy_masked(g.run(batch[0].state.tokens).logits, batch[0].x0, batch[0].state.masked);
  });
  EXPECT_LT(max_abs_diff(values(res.fast), values(ref)), 1e-12);
}

TEST(InnerLoop, ConsistentPlanNestsMasks) {
  InnerLoopConfig cfg;
  cfg.k = 4;
  Rng rng(8);
  const auto batch = make_batch(5, 0.3, rng);
  const auto plan = plan_inner_stages(batch, cfg, 8, rng);
  ASSERT_EQ(plan.size(), 4u);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    EXPECT_EQ(plan.back().input[b], batch[b].state);
    for (std::size_t j = 0; j + 1 < plan.size(); ++j) {
      const auto& big = plan[j].input[b].masked;
      const auto& small = plan[j + 1].input[b].masked;
      EXPECT_TRUE(std::includes(big.begin(), big.end(), small.begin(), small.end()));
      EXPECT_EQ(plan[j].next[b], plan[j + 1].input[b]);
    }
  }
  cfg.stages = InnerStages::kAnchorOnly;
  EXPECT_EQ(plan_inner_stages(batch, cfg, 8, rng).size(), 1u);
  cfg.stages = InnerStages::kPreAnchorOnly;
  EXPECT_EQ(plan_inner_stages(batch, cfg, 8, rng).size(), 3u);
}

TEST(InnerLoop, ZeroBothNeverMoves) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  InnerLoopConfig cfg;
  cfg.eta = 0.5;
  cfg.scope.init = FastInit::kZeroBoth;
  auto fast = BasicFastWeights<double>::create(mc, cfg.scope);
  Rng rng(9);
  auto res = inner_adapt(m, fast, make_batch(3, 0.6, rng), cfg, rng);
  for (auto* p : res.fast.params()) EXPECT_TRUE(p->all_zero());
}

TEST(InnerLoop, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    InnerLoopConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](InnerLoopConfig& c) { c.eta = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](InnerLoopConfig& c) { c.k = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](InnerLoopConfig& c) { c.s_pre = 0.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](InnerLoopConfig& c) { c.clip = 0.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](InnerLoopConfig& c) { c.teacher_reveal = 0.0; }).validate(), ConfigError);
  EXPECT_NO_THROW(bad([](InnerLoopConfig& c) {
                    c.s_pre = 0.5;
                    c.trajectory = Trajectory::kInconsistent;
                  }).validate());
}

TEST(Outer, InitialFastWeightsMatchStandardGradients) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  auto fast = BasicFastWeights<double>::create(mc, FastWeightConfig{});
  Rng rng(10);
  const auto batch = make_batch(3, 0.5, rng);
  const auto a = outer_gradients(m, &fast, batch, NoiseSchedule{});
  const auto b = outer_gradients(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch, NoiseSchedule{});
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(max_abs_diff(a.grads, b.grads), 0.0);
}

TEST(Outer, LossIgnoresTargetsOutsideMask) {
  const BasicModel<double> m = BasicModel<double>::init(small_model());
  Rng rng(11);
  auto batch = make_batch(2, 0.5, rng);
  const double before = outer_loss_value(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch, {});
  for (auto& a : batch)
    for (std::size_t i = 0; i < a.x0.size(); ++i)
      if (a.state.tokens[i] != 8) a.x0[i] = TokenId((a.x0[i] + 1) % 8);
  EXPECT_EQ(outer_loss_value(m, static_cast<const BasicFastWeights<double>*>(nullptr), batch, {}), before);
}

TEST(Outer, ClipGlobalNorm) {
  std::vector<BasicTensor<double>> g{vec({3}), vec({4})};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g[0][0], 3.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-12);
}

TEST(AdamWTest, FirstStepMovesByLearningRate) {
  BasicTensor<double> bias = vec({1.0});
  BasicTensor<double> mat({1, 1});
  mat[0] = 1.0;
  AdamW<double> opt;
  std::vector<BasicTensor<double>*> ps{&bias, &mat};
  opt.init(ps);
  opt.step(ps, {vec({0.5}), [] {
                  BasicTensor<double> t({1, 1});
                  t[0] = 0.5;
                  return t;
                }()},
           0.1);
  EXPECT_NEAR(bias[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(mat[0], 1.0 - 0.1 * 0.01 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(Schedule, WarmupThenCosine) {
  EXPECT_DOUBLE_EQ(learning_rate(0, 100, 1.0, 0.1, LrSchedule::kCosine), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(9, 100, 1.0, 0.1, LrSchedule::kCosine), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(10, 100, 1.0, 0.1, LrSchedule::kCosine), 1.0);
  EXPECT_NEAR(learning_rate(55, 100, 1.0, 0.1, LrSchedule::kCosine), 0.5, 1e-12);
  EXPECT_NEAR(learning_rate(99, 100, 1.0, 0.1, LrSchedule::kCosine), 0.5 * (1 + std::cos(M_PI * 89 / 90)), 1e-12);
  EXPECT_EQ(learning_rate(42, 100, 0.3, 0.1, LrSchedule::kConstant), 0.3);
}

TEST(Adapter, MergedStartsAtBaseAndProjectsGradients) {
  const auto mc = small_model();
  const BasicModel<double> m = BasicModel<double>::init(mc);
  auto ad = OuterAdapter<double>::create(m, 2, 4.0, 3);
  Rng rng(12);
  const auto batch = make_batch(2, 0.6, rng);
  const NoiseSchedule sch;
  const auto* none = static_cast<const BasicFastWeights<double>*>(nullptr);
  EXPECT_EQ(outer_loss_value(ad.merged(m), none, batch, sch), outer_loss_value(m, none, batch, sch));
  for (auto* p : ad.params())
    for (double& v : p->data()) v += 0.1 * rng.normal();
  const auto lg = outer_gradients(ad.merged(m), none, batch, sch);
  const auto proj = ad.project(lg.grads);
  const double h = 1e-6;
  for (std::size_t p : {std::size_t(0), std::size_t(1), std::size_t(5)}) {
    double& v = (*ad.params()[p])[1];
    const double keep = v;
    v = keep + h;
    const double up = outer_loss_value(ad.merged(m), none, batch, sch);
    v = keep - h;
    const double dn = outer_loss_value(ad.merged(m), none, batch, sch);
    v = keep;
    EXPECT_NEAR(proj[p][1], (up - dn) / (2 * h), 1e-6 * std::max(1.0, std::abs(proj[p][1])));
  }
  EXPECT_EQ(ad.param_names().front(), "outer/blocks.0." + std::string(slot_name(kAllSlots[0])) + ".A");
  EXPECT_THROW(OuterAdapter<double>::create(m, 0, 1.0, 0), ConfigError);
}

}  // namespace
}  // namespace memdlm
