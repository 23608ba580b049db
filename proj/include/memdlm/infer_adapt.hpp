// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-time reactivation of the inner loop: the prompt alone is treated as
// a clean target, partially masked, and written into fresh fast weights that
// then serve every denoising step of the response.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "memdlm/bilevel.hpp"

namespace memdlm {

struct InferenceAdaptConfig {
  bool enabled = false;
  double anchor_ratio = 0.2;
  double eta = 0.05;
  std::size_t epochs = 1;
  double s_pre = 1.5;
  Supervision supervision = Supervision::kCrossEntropy;

  void validate() const {
    if (!(anchor_ratio > 0.0 && anchor_ratio < 1.0)) throw ConfigError("infer.anchor_ratio must lie in (0, 1)");
    if (eta < 0.0) throw ConfigError("infer.eta must be >= 0");
    if (epochs == 0) throw ConfigError("infer.epochs must be positive");
    if (s_pre < 1.0) throw ConfigError("infer.s_pre must be >= 1");
  }
};

inline constexpr std::size_t kMinAdaptPrompt = 4;

template <typename T>
struct AdaptOutcome {
  BasicFastWeights<T> fast;  // φ₀ when no adaptation ran
  bool adapted = false;
  std::string warning;
  std::vector<InnerStageRecord> stages;
};

/// Builds the synthetic prompt anchor: round(anchor_ratio·len) prompt
/// positions masked uniformly, the whole sequence treated as response.
inline NoisyState prompt_anchor(std::span<const TokenId> prompt, double anchor_ratio, TokenId mask_id, Rng& rng) {
  const std::size_t n = prompt.size();
  const auto m = std::max<std::size_t>(1, std::size_t(std::llround(anchor_ratio * double(n))));
  Sequence tokens(prompt.begin(), prompt.end());
  for (std::size_t i : rng.sample_without_replacement(n, std::min(m, n))) tokens[i] = mask_id;
  NoisyState s = make_state(std::move(tokens), 0, 0.0, mask_id);
  s.t = s.mask_ratio();
  return s;
}

/// Per-prompt inner loop. `inner` supplies the trajectory shape (K,
/// normalization, clip, scope); `cfg` overrides η, s_pre and supervision.
template <typename T>
AdaptOutcome<T> adapt_on_prompt(const BasicModel<T>& model, BasicFastWeights<T> fast, std::span<const TokenId> prompt,
                                const InferenceAdaptConfig& cfg, const InnerLoopConfig& inner, Rng& rng) {
  AdaptOutcome<T> out;
  fast.reset();
  if (!cfg.enabled) {
    out.fast = std::move(fast);
    return out;
  }
  cfg.validate();
  if (prompt.size() < kMinAdaptPrompt) {
    out.warning = "prompt shorter than " + std::to_string(kMinAdaptPrompt) + " tokens; adaptation skipped";
    out.fast = std::move(fast);
    return out;
  }
  InnerLoopConfig ic = inner;
  ic.eta = cfg.eta;
  ic.s_pre = cfg.s_pre;
  ic.supervision = cfg.supervision;
  ic.trajectory = Trajectory::kAnchorConsistent;
  ic.validate();
  const TokenId mask = model.vocab().mask_id();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<Anchor> batch(1);
    batch[0].x0.assign(prompt.begin(), prompt.end());
    batch[0].state = prompt_anchor(prompt, cfg.anchor_ratio, mask, rng);
    const auto plan = plan_inner_stages(batch, ic, mask, rng);
    auto recs = run_inner_stages(model, fast, plan, batch, ic);
    out.stages.insert(out.stages.end(), recs.begin(), recs.end());
  }
  out.adapted = true;
  out.fast = std::move(fast);
  return out;
}

}  // namespace memdlm
