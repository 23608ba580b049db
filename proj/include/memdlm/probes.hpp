// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exposure-bias and retrieval probes.
//
// Static loss masks the clean response with the true forward process at
// ratio t; sequential loss lets the model's own greedy sampler walk from the
// fully masked response until at most ⌊t·R⌋ masks remain and scores what is
// left. Both are per-masked-token cross-entropies against x0.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "memdlm/diffusion.hpp"
#include "memdlm/infer_adapt.hpp"
#include "memdlm/parallel.hpp"
#include "memdlm/taskgen.hpp"

namespace memdlm {

/// Clean sequence and prompt boundary for a pair.
inline Sequence concat(const TaskPair& p) {
  Sequence s = p.prompt;
  s.insert(s.end(), p.response.begin(), p.response.end());
  return s;
}

namespace detail {

/// Σ of per-position CE in double; the terms are float-exact so the sum does
/// not depend on the caller.
template <typename T>
double masked_ce_sum(const BasicTensor<T>& logits, std::span<const TokenId> x0, const std::vector<std::size_t>& pos) {
  const std::size_t V = logits.shape()[1];
  double s = 0.0;
  for (std::size_t p : pos) {
    const T* row = logits.data().data() + p * V;
    s += double(detail::log_sum_exp(row, V) - row[x0[p]]);
  }
  return s;
}

/// Mean that is exact when every term is identical.
inline double shifted_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x - v.front();
  return v.front() + acc / double(v.size());
}

inline void require_pairs(const std::vector<TaskPair>& pairs, double t) {
  if (pairs.empty()) throw DegenerateInputError("probe: no evaluation pairs");
  if (!(t > 0.0) || t > 1.0) throw DegenerateInputError("probe: t must lie in (0, 1]");
}

}  // namespace detail

/// Per-pair static loss, averaged over `n_samples` forward-process draws
/// seeded by (seed, pair index, sample).
template <typename T>
std::vector<double> static_loss_per_pair(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                                         const std::vector<TaskPair>& pairs, double t, std::size_t n_samples,
                                         std::uint64_t seed) {
  detail::require_pairs(pairs, t);
  if (n_samples == 0) throw ConfigError("probe: n_samples must be positive");
  const TokenId mask = model.vocab().mask_id();
  return parallel_map(pairs.size(), [&](std::size_t i) {
    const Sequence x0 = concat(pairs[i]);
    std::vector<double> per;
    for (std::size_t s = 0; s < n_samples; ++s) {
      Rng rng(derive_seed(seed, Stream::kProbe, i, s, std::uint64_t(std::llround(t * 1e6))));
      const NoisyState st = forward_mask(x0, t, pairs[i].prompt.size(), mask, rng);
      const auto logits = forward_logits(model, fast, st.tokens);
      per.push_back(detail::masked_ce_sum(logits, x0, st.masked) / double(st.masked.size()));
    }
    return detail::shifted_mean(per);
  });
}

template <typename T>
double static_loss(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const std::vector<TaskPair>& pairs,
                   double t, std::size_t n_samples, std::uint64_t seed) {
  const auto per = static_loss_per_pair(model, fast, pairs, t, n_samples, seed);
  return std::accumulate(per.begin(), per.end(), 0.0) / double(per.size());
}

/// The sampler's state at the first step whose mask count is ≤ ⌊t·R⌋.
template <typename T>
NoisyState sequential_state(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const TaskPair& pair,
                            double t, const SamplerConfig& cfg) {
  const TokenId mask = model.vocab().mask_id();
  const std::size_t R = pair.response.size();
  const auto stop = std::size_t(std::floor(t * double(R) + 1e-9));
  Sequence tokens = pair.prompt;
  tokens.resize(pair.prompt.size() + R, mask);
  NoisyState st = make_state(std::move(tokens), pair.prompt.size(), 1.0, mask);
  for (std::size_t k : unmask_schedule(R, cfg.n_steps)) {
    if (st.masked.size() <= stop) break;
    if (k > 0) st = denoise_step(model, fast, st, k);
  }
  return st;
}

/// Per-pair sequential loss; pairs whose trajectory has no masks left are empty.
template <typename T>
std::vector<std::optional<double>> sequential_loss_per_pair(const BasicModel<T>& model,
                                                            const BasicFastWeights<T>* fast,
                                                            const std::vector<TaskPair>& pairs, double t,
                                                            const SamplerConfig& cfg) {
  detail::require_pairs(pairs, t);
  return parallel_map(pairs.size(), [&](std::size_t i) -> std::optional<double> {
    const NoisyState st = sequential_state(model, fast, pairs[i], t, cfg);
    if (st.masked.empty()) return std::nullopt;
    const Sequence x0 = concat(pairs[i]);
    const auto logits = forward_logits(model, fast, st.tokens);
    return detail::masked_ce_sum(logits, x0, st.masked) / double(st.masked.size());
  });
}

template <typename T>
double sequential_loss(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const std::vector<TaskPair>& pairs,
                       double t, const SamplerConfig& cfg) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : sequential_loss_per_pair(model, fast, pairs, t, cfg)) {
    if (v) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) throw DegenerateInputError("sequential_loss: no masked positions remain at t");
  return s / double(n);
}

// ---------------------------------------------------------------------------
// Exposure-bias report

struct ExposureRow {
  double t = 0.0;
  double l_static = 0.0;
  double l_seq = 0.0;
  std::optional<double> r_eb;
  std::size_t n = 0;
};

struct ExposureBiasReport {
  std::vector<ExposureRow> rows;  // in trajectory order: t decreasing
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;

  double mean_ratio() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.r_eb) {
        s += *r.r_eb;
        ++n;
      }
    }
    return n ? s / double(n) : 0.0;
  }
};

inline std::vector<double> default_exposure_grid() {
  std::vector<double> g;
  for (int i = 10; i >= 1; --i) g.push_back(double(i) / 10.0);
  return g;
}

/// Both losses are averaged over the same pairs: those with masks left on
/// the sequential trajectory.
template <typename T>
ExposureBiasReport exposure_report(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                                   const std::vector<TaskPair>& pairs, const std::vector<double>& grid,
                                   std::size_t n_samples, const SamplerConfig& cfg, std::uint64_t seed) {
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] < grid[i - 1])) throw ConfigError("exposure grid must be strictly decreasing");
  }
  ExposureBiasReport rep;
  rep.seed = seed;
  rep.n_samples = n_samples;
  for (double t : grid) {
    const auto seq = sequential_loss_per_pair(model, fast, pairs, t, cfg);
    const auto stat = static_loss_per_pair(model, fast, pairs, t, n_samples, seed);
    ExposureRow row;
    row.t = t;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (!seq[i]) continue;
      row.l_seq += *seq[i];
      row.l_static += stat[i];
      ++row.n;
    }
    if (row.n) {
      row.l_seq /= double(row.n);
      row.l_static /= double(row.n);
    }
    if (row.l_static > 0.0) row.r_eb = row.l_seq / row.l_static;
    rep.rows.push_back(row);
  }
  return rep;
}

inline std::string exposure_csv(const ExposureBiasReport& rep) {
  auto num = [](double v) {
    char buf[32];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
  };
  std::string out = "t,l_static,l_seq,r_eb,n\n";
  for (const auto& r : rep.rows) {
    out += num(r.t) + ',' + num(r.l_static) + ',' + num(r.l_seq) + ',';
    if (r.r_eb) out += num(*r.r_eb);
    out += ',' + std::to_string(r.n) + '\n';
  }
  return out;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * double(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Retrieval

struct BucketAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

/// Accuracy keyed by prompt length.
using RetrievalTable = std::map<std::size_t, BucketAccuracy>;

/// Exact match per item: each response splits into consecutive items of
/// `item_len` tokens (0 means the whole response is one item).
inline RetrievalTable score_predictions(const std::vector<TaskPair>& pairs, const std::vector<Sequence>& predicted,
                                        std::size_t item_len = 0) {
  if (pairs.size() != predicted.size()) throw DimensionError("score_predictions: count mismatch");
  RetrievalTable table;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Sequence& gold = pairs[i].response;
    const Sequence& got = predicted[i];
    auto& b = table[pairs[i].prompt.size()];
    const std::size_t w = item_len == 0 ? gold.size() : item_len;
    if (w == 0 || gold.size() % w != 0) throw DimensionError("score_predictions: response not divisible into items");
    for (std::size_t at = 0; at < gold.size(); at += w) {
      ++b.total;
      bool ok = got.size() >= at + w;
      for (std::size_t j = 0; ok && j < w; ++j) ok = got[at + j] == gold[at + j];
      if (ok) ++b.correct;
    }
  }
  return table;
}

inline double overall_accuracy(const RetrievalTable& t) {
  std::size_t c = 0, n = 0;
  for (const auto& [len, b] : t) {
    c += b.correct;
    n += b.total;
  }
  return n ? double(c) / double(n) : 0.0;
}

/// Produces a response for pair i.
using Predictor = std::function<Sequence(const TaskPair&, std::size_t)>;

inline RetrievalTable retrieval_eval(const std::vector<TaskPair>& pairs, const Predictor& predict,
                                     std::size_t item_len = 0) {
  auto preds = parallel_map(pairs.size(), [&](std::size_t i) { return predict(pairs[i], i); });
  return score_predictions(pairs, preds, item_len);
}

/// Greedy sampler, optionally preceded by prompt adaptation from φ₀ seeded
/// per pair index. With adaptation disabled the base model runs alone.
template <typename T>
Predictor sampler_predictor(const BasicModel<T>& model, const BasicFastWeights<T>* fast0, const SamplerConfig& sampler,
                            const InferenceAdaptConfig& adapt, const InnerLoopConfig& inner, std::uint64_t seed) {
  return [&model, fast0, sampler, adapt, inner, seed](const TaskPair& p, std::size_t i) {
    const BasicFastWeights<T>* none = nullptr;
    Sequence full;
    if (!adapt.enabled || !fast0) {
      full = generate(model, none, p.prompt, p.response.size(), sampler);
    } else {
      Rng rng(derive_seed(seed, Stream::kInfer, i));
      auto out = adapt_on_prompt(model, *fast0, p.prompt, adapt, inner, rng);
      full = generate(model, &out.fast, p.prompt, p.response.size(), sampler);
    }
    return Sequence(full.begin() + std::ptrdiff_t(p.prompt.size()), full.end());
  };
}

}  // namespace memdlm
