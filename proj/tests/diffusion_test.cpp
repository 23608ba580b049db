// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "memdlm/diffusion.hpp"

namespace memdlm {
namespace {

constexpr TokenId kMask = 64;

Sequence ramp(std::size_t n) {
  Sequence s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = TokenId(i % 64);
  return s;
}

bool subset(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

TEST(ForwardMask, EndpointsAndPrompt) {
  Rng rng(1);
  const Sequence x = ramp(20);
  const auto none = forward_mask(x, 0.0, 5, kMask, rng);
  EXPECT_EQ(none.tokens, x);
  EXPECT_TRUE(none.masked.empty());
  const auto all = forward_mask(x, 1.0, 5, kMask, rng);
  EXPECT_EQ(all.masked.size(), 15u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(all.tokens[i], x[i]);
  for (std::size_t i = 5; i < 20; ++i) EXPECT_EQ(all.tokens[i], kMask);
}

TEST(ForwardMask, NeverEmptyAboveZero) {
  Rng rng(2);
  const Sequence x = ramp(6);
  for (int k = 0; k < 500; ++k) {
    const auto s = forward_mask(x, 0.01, 2, kMask, rng);
    EXPECT_GE(s.masked.size(), 1u);
    validate_state(s, kMask);
  }
}

TEST(ForwardMask, MeanCountWithinBinomialBand) {
  Rng rng(3);
  const Sequence x = ramp(1000);
  const int trials = 10000;
  double total = 0.0;
  for (int k = 0; k < trials; ++k) total += double(forward_mask(x, 0.5, 0, kMask, rng).masked.size());
  const double mean = total / trials;
  const double se = std::sqrt(1000 * 0.25 / trials);
  EXPECT_NEAR(mean, 500.0, 3.29 * se);
}

TEST(ForwardMask, RejectsBadInputs) {
  Rng rng(4);
  const Sequence x = ramp(4);
  EXPECT_THROW(forward_mask(x, 1.5, 0, kMask, rng), BoundsError);
  EXPECT_THROW(forward_mask(x, -0.1, 0, kMask, rng), BoundsError);
  EXPECT_THROW(forward_mask(x, 0.5, 4, kMask, rng), DegenerateInputError);
  EXPECT_THROW(forward_mask(x, 0.5, 5, kMask, rng), BoundsError);
}

TEST(FurtherMask, NoOpAndSaturation) {
  Rng rng(5);
  const auto s = forward_mask(ramp(12), 0.5, 2, kMask, rng);
  EXPECT_EQ(further_mask(s, s.mask_ratio(), kMask, rng), s);
  const auto full = further_mask(s, 1.0, kMask, rng);
  EXPECT_EQ(full.masked.size(), 10u);
  EXPECT_EQ(further_mask(full, 1.0, kMask, rng), full);
}

TEST(FurtherMask, NestsOverManyTrials) {
  Rng rng(6);
  const Sequence x = ramp(40);
  for (int k = 0; k < 1000; ++k) {
    const double t = rng.uniform();
    const auto s = forward_mask(x, t, 8, kMask, rng);
    const double target = s.mask_ratio() + (1.0 - s.mask_ratio()) * rng.uniform();
    const auto f = further_mask(s, target, kMask, rng);
    ASSERT_TRUE(subset(s.masked, f.masked));
    EXPECT_EQ(f.masked.size(), std::max(s.masked.size(), std::size_t(std::llround(target * 32))));
    for (std::size_t i = 0; i < 40; ++i) {
      if (f.tokens[i] != kMask) {
        EXPECT_EQ(f.tokens[i], x[i]);
      }
    }
  }
}

TEST(FurtherMask, RejectsLowerTarget) {
  Rng rng(7);
  const auto s = forward_mask(ramp(12), 1.0, 2, kMask, rng);
  EXPECT_THROW(further_mask(s, 0.5, kMask, rng), OrderingError);
}

TEST(PreAnchor, Examples) {
  EXPECT_DOUBLE_EQ(pre_anchor_ratio(0.4, 1.5), 0.4 * 1.5);
  EXPECT_DOUBLE_EQ(pre_anchor_ratio(0.8, 1.5), 1.0);
  EXPECT_DOUBLE_EQ(pre_anchor_ratio(0.5, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(pre_anchor_ratio(0.5, 0.5), 0.5);
}

TEST(MdlmLoss, UniformLogits) {
  Tape<double> tape(false);
  const auto logits = tape.leaf(BasicTensor<double>({12, 64}), false);
  const Sequence x0 = ramp(12);
  NoisyState s;
  s.tokens = x0;
  s.t = 0.5;
  s.prompt_len = 2;
  for (std::size_t i = 2; i < 12; ++i) {
    s.tokens[i] = kMask;
    s.masked.push_back(i);
  }
  EXPECT_NEAR(mdlm_loss(logits, x0, s, NoiseSchedule{}).item(), 2.0 * 10.0 * std::log(64.0), 1e-9);
  EXPECT_NEAR(2.0 * 10.0 * std::log(64.0), 83.178, 1e-3);
}

TEST(MdlmLoss, EmptyMaskIsZeroAndWeightIsClamped) {
  Tape<double> tape(false);
  Rng rng(8);
  BasicTensor<double> z({6, 64});
  for (double& v : z.data()) v = rng.normal();
  const auto logits = tape.leaf(z, false);
  const Sequence x0 = ramp(6);
  NoisyState s;
  s.tokens = x0;
  s.t = 0.3;
  EXPECT_EQ(mdlm_loss(logits, x0, s, NoiseSchedule{}).item(), 0.0);
  s.t = 0.001;
  s.masked = {3};
  s.tokens[3] = kMask;
  const double ce = cross_entropy_masked(logits, x0, s.masked).item();
  EXPECT_NEAR(mdlm_loss(logits, x0, s, NoiseSchedule{0.02}).item(), 50.0 * ce, 1e-9);
}

TEST(Sampler, ScheduleCounts) {
  EXPECT_EQ(unmask_schedule(10, 3), (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(unmask_schedule(2, 4), (std::vector<std::size_t>{1, 1, 0, 0}));
  EXPECT_EQ(unmask_schedule(5, 1), (std::vector<std::size_t>{5}));
  EXPECT_THROW(unmask_schedule(5, 0), ConfigError);
}

TEST(Sampler, UnmasksMostConfidentArgmax) {
  const std::size_t L = 8, V = 4;
  BasicTensor<double> logits({L, V});
  const double conf[L] = {0, 0, 0.5, 3.0, 1.0, 2.0, 3.0, 0.1};
  const int arg[L] = {0, 0, 1, 2, 3, 0, 1, 2};
  for (std::size_t i = 0; i < L; ++i) logits.at(i, std::size_t(arg[i])) = conf[i];
  NoisyState s = make_state(Sequence{1, 2, 4, 4, 4, 4, 4, 4}, 2, 1.0, 4);
  const auto out = unmask_from_logits(logits, s, 3);
  EXPECT_EQ(out.tokens, (Sequence{1, 2, 4, 2, 4, 0, 1, 4}));
  EXPECT_EQ(out.masked, (std::vector<std::size_t>{2, 4, 7}));
  const auto last = unmask_from_logits(logits, out, 3);
  EXPECT_TRUE(last.masked.empty());
  EXPECT_EQ(last.tokens, (Sequence{1, 2, 1, 2, 3, 0, 1, 2}));
  EXPECT_THROW(unmask_from_logits(logits, last, 1), BoundsError);
}

TEST(Sampler, PredictRowTiesToLowestId) {
  const std::vector<double> row{1.0, 3.0, 3.0, 0.0};
  const auto p = predict_row(std::span<const double>(row));
  EXPECT_EQ(p.token, 1);
  double z = 0.0;
  for (double v : row) z += std::exp(v - 3.0);
  EXPECT_DOUBLE_EQ(p.confidence, 1.0 / z);
}

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.max_len = 16;
  c.seed = 1;
  return c;
}

TEST(Sampler, TrajectoryStepsAndDeterminism) {
  const Model m = Model::init(small_model());
  const Sequence prompt{1, 2, 3};
  const auto traj = generate_trajectory(m, static_cast<const FastWeights*>(nullptr), prompt, 6, SamplerConfig{6});
  ASSERT_EQ(traj.size(), 7u);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(traj[k].masked.size(), 6 - k);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(traj[k].tokens[i], prompt[i]);
    if (k > 0) {
      ASSERT_TRUE(subset(traj[k].masked, traj[k - 1].masked));
      for (std::size_t i = 0; i < 9; ++i) {
        if (traj[k - 1].tokens[i] != m.vocab().mask_id()) {
          EXPECT_EQ(traj[k].tokens[i], traj[k - 1].tokens[i]);
        }
      }
    }
  }
  const auto a = generate(m, static_cast<const FastWeights*>(nullptr), prompt, 6, SamplerConfig{3});
  const auto b = generate(m, static_cast<const FastWeights*>(nullptr), prompt, 6, SamplerConfig{3});
  EXPECT_EQ(a, b);
  for (TokenId t : a) EXPECT_LT(t, 8);
}

TEST(Sampler, SingleShotMatchesArgmax) {
  const Model m = Model::init(small_model());
  const Sequence prompt{1, 2, 3};
  Sequence x = prompt;
  x.resize(7, m.vocab().mask_id());
  const auto logits = forward_logits(m, static_cast<const FastWeights*>(nullptr), x);
  const auto out = generate(m, static_cast<const FastWeights*>(nullptr), prompt, 4, SamplerConfig{1});
  for (std::size_t i = 3; i < 7; ++i) {
    const auto row = std::span<const float>(logits.data().data() + i * 8, 8);
    EXPECT_EQ(out[i], predict_row(row).token);
  }
}

TEST(Sampler, RejectsOverlongAndExcessUnmask) {
  const Model m = Model::init(small_model());
  EXPECT_THROW(generate(m, static_cast<const FastWeights*>(nullptr), Sequence(10, 1), 7, SamplerConfig{}),
               LengthError);
  const auto s = make_state(Sequence{1, 8, 8}, 1, 1.0, 8);
  EXPECT_THROW(denoise_step(m, static_cast<const FastWeights*>(nullptr), s, 3), BoundsError);
  EXPECT_EQ(denoise_step(m, static_cast<const FastWeights*>(nullptr), s, 0), s);
}

}  // namespace
}  // namespace memdlm
