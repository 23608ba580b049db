// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Absorbing-state corruption, the weighted masked loss, and the greedy
// confidence-ordered denoising sampler.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "memdlm/autodiff.hpp"
#include "memdlm/model.hpp"
#include "memdlm/rng.hpp"

namespace memdlm {

/// x_t with its mask set. Positions below prompt_len form the prompt, which
/// training never masks; the rest is the response region.
struct NoisyState {
  Sequence tokens;
  double t = 0.0;
  std::vector<std::size_t> masked;  // ascending
  std::size_t prompt_len = 0;

  std::size_t response_len() const { return tokens.size() - prompt_len; }
  double mask_ratio() const {
    return response_len() == 0 ? 0.0 : double(masked.size()) / double(response_len());
  }
  bool is_masked(std::size_t i, TokenId mask_id) const { return tokens[i] == mask_id; }

  friend bool operator==(const NoisyState&, const NoisyState&) = default;
};

inline std::vector<std::size_t> mask_positions(std::span<const TokenId> tokens, TokenId mask_id) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == mask_id) out.push_back(i);
  }
  return out;
}

inline NoisyState make_state(Sequence tokens, std::size_t prompt_len, double t, TokenId mask_id) {
  NoisyState s;
  s.masked = mask_positions(tokens, mask_id);
  s.tokens = std::move(tokens);
  s.prompt_len = prompt_len;
  s.t = t;
  return s;
}

/// Checks the mask-set and prompt invariants; throws on violation.
inline void validate_state(const NoisyState& s, TokenId mask_id) {
  if (s.prompt_len > s.tokens.size()) throw BoundsError("prompt_len exceeds sequence length");
  if (s.masked != mask_positions(s.tokens, mask_id)) throw Error("masked set disagrees with mask tokens");
  if (!s.masked.empty() && s.masked.front() < s.prompt_len) throw Error("prompt position is masked");
}

struct NoiseSchedule {
  double t_min = 0.02;

  double mask_probability(double t) const { return t; }
  double weight(double t) const { return 1.0 / std::max(t, t_min); }
};

/// Masks each response position independently with probability t. A draw
/// that masks nothing at t > 0 is repaired by masking one uniform position.
inline NoisyState forward_mask(std::span<const TokenId> x0, double t, std::size_t prompt_len, TokenId mask_id,
                               Rng& rng) {
  if (t < 0.0 || t > 1.0) throw BoundsError("forward_mask: t must lie in [0, 1], got " + std::to_string(t));
  if (prompt_len > x0.size()) throw BoundsError("forward_mask: prompt_len exceeds sequence length");
  const std::size_t resp = x0.size() - prompt_len;
  if (resp == 0 && t > 0.0) throw DegenerateInputError("forward_mask: empty response region at t > 0");
  NoisyState s;
  s.tokens.assign(x0.begin(), x0.end());
  s.prompt_len = prompt_len;
  s.t = t;
  for (std::size_t i = prompt_len; i < x0.size(); ++i) {
    if (rng.uniform() < t) {
      s.tokens[i] = mask_id;
      s.masked.push_back(i);
    }
  }
  if (t > 0.0 && s.masked.empty()) {
    const std::size_t i = prompt_len + rng.uniform_int(resp);
    s.tokens[i] = mask_id;
    s.masked.push_back(i);
  }
  return s;
}

/// Masks additional visible response tokens until round(target·R) are masked.
/// The result's mask set always contains the input's.
inline NoisyState further_mask(const NoisyState& xt, double target_ratio, TokenId mask_id, Rng& rng) {
  const std::size_t resp = xt.response_len();
  const double current = xt.mask_ratio();
  if (target_ratio + 1e-12 < current) {
    throw OrderingError("further_mask: target ratio " + std::to_string(target_ratio) +
                        " is below the current ratio " + std::to_string(current));
  }
  const auto wanted = std::size_t(std::llround(std::min(target_ratio, 1.0) * double(resp)));
  const std::size_t target = std::clamp(wanted, xt.masked.size(), resp);
  NoisyState out = xt;
  if (target == xt.masked.size()) return out;
  std::vector<std::size_t> visible;
  for (std::size_t i = xt.prompt_len; i < xt.tokens.size(); ++i) {
    if (xt.tokens[i] != mask_id) visible.push_back(i);
  }
  const auto pick = rng.sample_without_replacement(visible.size(), target - xt.masked.size());
  for (std::size_t j : pick) out.tokens[visible[j]] = mask_id;
  out.masked = mask_positions(out.tokens, mask_id);
  out.t = double(out.masked.size()) / double(resp);
  return out;
}

/// Starting mask ratio of the pre-anchor state: min(1, max(s_pre·t, t)).
inline double pre_anchor_ratio(double t, double s_pre) { return std::min(1.0, std::max(s_pre * t, t)); }

/// ω(t) · Σ_{i∈M_t} −log p(x0ⁱ | x_t).
template <typename T>
DiffTensor<T> mdlm_loss(const DiffTensor<T>& logits, std::span<const TokenId> x0, const NoisyState& state,
                        const NoiseSchedule& schedule) {
  return scale(cross_entropy_masked(logits, x0, state.masked), T(schedule.weight(state.t)));
}

// ---------------------------------------------------------------------------
// Sampler

struct SamplerConfig {
  std::size_t n_steps = 10;
};

/// Per-step unmask counts: near-equal, remainder to the earliest steps.
inline std::vector<std::size_t> unmask_schedule(std::size_t response_len, std::size_t n_steps) {
  if (n_steps == 0) throw ConfigError("sampler needs at least one step");
  std::vector<std::size_t> out(n_steps, response_len / n_steps);
  for (std::size_t i = 0; i < response_len % n_steps; ++i) ++out[i];
  return out;
}

struct Prediction {
  TokenId token = 0;
  double confidence = 0.0;
};

/// Argmax token (lowest id on ties) and its softmax probability for one row.
template <typename T>
Prediction predict_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  double s = 0.0;
  for (const T& v : row) s += std::exp(double(v) - double(row[best]));
  return {TokenId(best), 1.0 / s};
}

/// Fills the k most confident masked positions from precomputed logits. Ties
/// on confidence go to the lower position.
template <typename T>
NoisyState unmask_from_logits(const BasicTensor<T>& logits, const NoisyState& state, std::size_t k) {
  if (k > state.masked.size()) {
    throw BoundsError("denoise_step: asked to unmask " + std::to_string(k) + " of " +
                      std::to_string(state.masked.size()) + " masked positions");
  }
  const std::size_t V = logits.shape()[1];
  struct Cand {
    std::size_t pos;
    Prediction pred;
  };
  std::vector<Cand> cands;
  cands.reserve(state.masked.size());
  for (std::size_t p : state.masked) {
    cands.push_back({p, predict_row(std::span<const T>(logits.data().data() + p * V, V))});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.pred.confidence > b.pred.confidence; });
  NoisyState out = state;
  for (std::size_t i = 0; i < k; ++i) out.tokens[cands[i].pos] = cands[i].pred.token;
  std::vector<std::size_t> still;
  for (std::size_t p : state.masked) {
    if (std::none_of(cands.begin(), cands.begin() + std::ptrdiff_t(k), [&](const Cand& c) { return c.pos == p; })) {
      still.push_back(p);
    }
  }
  out.masked = std::move(still);
  out.t = out.response_len() == 0 ? 0.0 : double(out.masked.size()) / double(out.response_len());
  return out;
}

template <typename T>
NoisyState denoise_step(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const NoisyState& state,
                        std::size_t k_unmask) {
  if (k_unmask > state.masked.size()) {
    throw BoundsError("denoise_step: asked to unmask " + std::to_string(k_unmask) + " of " +
                      std::to_string(state.masked.size()) + " masked positions");
  }
  if (k_unmask == 0) return state;
  return unmask_from_logits(forward_logits(model, fast, state.tokens), state, k_unmask);
}

/// Sequence of states from the fully masked response to the clean output.
template <typename T>
std::vector<NoisyState> generate_trajectory(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                                            std::span<const TokenId> prompt, std::size_t response_len,
                                            const SamplerConfig& cfg) {
  const TokenId mask = model.vocab().mask_id();
  if (prompt.size() + response_len > model.config().max_len) {
    throw LengthError("generate: prompt + response exceeds max_len");
  }
  Sequence tokens(prompt.begin(), prompt.end());
  tokens.resize(prompt.size() + response_len, mask);
  std::vector<NoisyState> traj;
  traj.push_back(make_state(std::move(tokens), prompt.size(), 1.0, mask));
  for (std::size_t k : unmask_schedule(response_len, cfg.n_steps)) {
    if (k == 0) continue;
    traj.push_back(denoise_step(model, fast, traj.back(), k));
  }
  return traj;
}

template <typename T>
Sequence generate(const BasicModel<T>& model, const BasicFastWeights<T>* fast, std::span<const TokenId> prompt,
                  std::size_t response_len, const SamplerConfig& cfg) {
  return generate_trajectory(model, fast, prompt, response_len, cfg).back().tokens;
}

}  // namespace memdlm
