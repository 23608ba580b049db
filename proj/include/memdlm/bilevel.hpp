// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bi-level training step. The inner loop writes a per-batch memory into fast
// weights φ by SGD along an anchor-consistent masking trajectory
// x_pre → x_t → x0; the outer loop then updates θ on the same anchor x_t with
// φ held constant (first-order: no gradient flows through the inner updates).

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "memdlm/autodiff.hpp"
#include "memdlm/diffusion.hpp"
#include "memdlm/model.hpp"
#include "memdlm/parallel.hpp"
#include "memdlm/rng.hpp"

namespace memdlm {

enum class Supervision { kCrossEntropy, kKlDistill, kReverseKlDistill, kHiddenCosine, kHiddenMse };
enum class Stage1Target { kBroadClean, kAnchorTokenOnly };
enum class GradNorm { kLocal, kGlobal, kOff };
enum class Trajectory { kAnchorConsistent, kInconsistent };
enum class InnerStages { kBoth, kPreAnchorOnly, kAnchorOnly };

struct InnerLoopConfig {
  double eta = 0.05;
  std::size_t k = 2;  // pre-anchor stages + 1
  double s_pre = 1.5;
  Supervision supervision = Supervision::kCrossEntropy;
  Stage1Target stage1_target = Stage1Target::kBroadClean;
  GradNorm normalization = GradNorm::kLocal;
  std::optional<double> clip = 1.0;
  FastWeightConfig scope;
  Trajectory trajectory = Trajectory::kAnchorConsistent;
  InnerStages stages = InnerStages::kBoth;
  double teacher_reveal = 0.25;  // fraction of |M_t| the teacher state reveals
  double t_min = 0.02;           // lower end of the fresh timesteps drawn by the inconsistent variant

  void validate() const {
    if (eta < 0.0) throw ConfigError("inner.eta must be >= 0");
    if (k < 1) throw ConfigError("inner.k must be >= 1");
    if (trajectory == Trajectory::kAnchorConsistent && s_pre < 1.0) {
      throw ConfigError("inner.s_pre must be >= 1 for anchor-consistent trajectories");
    }
    if (clip && *clip <= 0.0) throw ConfigError("inner.clip must be positive or none");
    if (teacher_reveal <= 0.0 || teacher_reveal > 1.0) throw ConfigError("inner.teacher_reveal must lie in (0, 1]");
  }
};

/// A clean sequence with its prompt boundary.
struct Example {
  Sequence x0;
  std::size_t prompt_len = 0;
};

/// A clean sequence and the noisy anchor state built from it.
struct Anchor {
  Sequence x0;
  NoisyState state;
};

inline constexpr double kNormEps = 1e-12;

/// In-place normalization of fast-weight gradients.
///   local:  each tensor scaled to unit norm, then per-tensor clip
///   global: one scale by the global norm, then global clip
///   off:    global clip only
template <typename T>
void normalize_gradients(std::vector<BasicTensor<T>>& grads, GradNorm mode, std::optional<double> clip) {
  auto scale_all = [](BasicTensor<T>& g, double s) {
    for (auto& v : g.data()) v = T(double(v) * s);
  };
  auto global_norm = [&]() {
    double s = 0.0;
    for (const auto& g : grads)
      for (const T& v : g.data()) s += double(v) * double(v);
    return std::sqrt(s);
  };
  switch (mode) {
    case GradNorm::kLocal:
      for (auto& g : grads) {
        const double n = l2_norm<T>(g.data());
        scale_all(g, 1.0 / std::max(kNormEps, n));
        if (clip) {
          const double n2 = l2_norm<T>(g.data());
          if (n2 > *clip) scale_all(g, *clip / n2);
        }
      }
      break;
    case GradNorm::kGlobal: {
      const double n = global_norm();
      for (auto& g : grads) scale_all(g, 1.0 / std::max(kNormEps, n));
      if (clip) {
        const double n2 = global_norm();
        if (n2 > *clip)
          for (auto& g : grads) scale_all(g, *clip / n2);
      }
      break;
    }
    case GradNorm::kOff:
      if (clip) {
        const double n = global_norm();
        if (n > *clip)
          for (auto& g : grads) scale_all(g, *clip / n);
      }
      break;
  }
}

/// Sorted set difference a \ b.
inline std::vector<std::size_t> set_difference(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

/// Positions supervised by a pre-anchor stage.
inline std::vector<std::size_t> stage1_positions(const NoisyState& x_pre, const NoisyState& x_next, Stage1Target target) {
  return target == Stage1Target::kBroadClean ? x_pre.masked : set_difference(x_pre.masked, x_next.masked);
}

/// Pre-anchor stage loss: CE toward x0 from the noisier state. broad_clean
/// supervises every position masked in x_pre; anchor_token_only only those
/// the next state reveals.
template <typename T>
DiffTensor<T> stage1_loss(ModelGraph<T>& graph, const NoisyState& x_pre, const NoisyState& x_next,
                          std::span<const TokenId> x0, Stage1Target target) {
  const auto pos = stage1_positions(x_pre, x_next, target);
  return cross_entropy_masked(graph.run(x_pre.tokens).logits, x0, pos);
}

/// Frozen teacher branch for the self-distillation modes: the same θ and φ
/// evaluated one denoising step ahead of the student.
template <typename T>
struct Teacher {
  NoisyState state;
  BasicTensor<T> logits;
  BasicTensor<T> hidden;
};

template <typename T>
Teacher<T> make_teacher(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const NoisyState& x_t,
                        double reveal) {
  Teacher<T> t;
  const auto k = std::size_t(std::ceil(reveal * double(x_t.masked.size())));
  t.state = denoise_step(model, fast, x_t, std::min(k, x_t.masked.size()));
  ModelGraph<T> g(model, fast, {});
  auto out = g.run(t.state.tokens);
  t.logits = out.logits.to_tensor();
  t.hidden = out.hidden.to_tensor();
  return t;
}

/// Teacher evaluated on exactly the student's state.
template <typename T>
Teacher<T> make_identity_teacher(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const NoisyState& x_t) {
  Teacher<T> t;
  t.state = x_t;
  ModelGraph<T> g(model, fast, {});
  auto out = g.run(x_t.tokens);
  t.logits = out.logits.to_tensor();
  t.hidden = out.hidden.to_tensor();
  return t;
}

/// Anchor-to-target stage loss on M_t. The distillation modes need a teacher.
template <typename T>
DiffTensor<T> stage2_loss(ModelGraph<T>& graph, const NoisyState& x_t, std::span<const TokenId> x0,
                          Supervision mode, const Teacher<T>* teacher) {
  if (mode != Supervision::kCrossEntropy && !teacher) throw Error("stage2_loss: distillation needs a teacher");
  switch (mode) {
    case Supervision::kCrossEntropy:
      return cross_entropy_masked(graph.run(x_t.tokens).logits, x0, x_t.masked);
    case Supervision::kKlDistill:
      return kl_masked(graph.run(x_t.tokens).logits, teacher->logits, x_t.masked, KlDirection::kForward);
    case Supervision::kReverseKlDistill:
      return kl_masked(graph.run(x_t.tokens).logits, teacher->logits, x_t.masked, KlDirection::kReverse);
    case Supervision::kHiddenCosine:
      return cosine_distance_masked(graph.run(x_t.tokens, false).hidden, teacher->hidden, x_t.masked);
    case Supervision::kHiddenMse:
      return mse_masked(graph.run(x_t.tokens, false).hidden, teacher->hidden, x_t.masked);
  }
  throw Error("unknown supervision mode");
}

// ---------------------------------------------------------------------------
// Inner loop

/// One inner stage for every batch member.
struct InnerStagePlan {
  bool anchor_stage = false;
  std::vector<NoisyState> input;  // per batch member
  std::vector<NoisyState> next;   // pre-anchor stages: the state this one denoises toward
};

struct InnerStageRecord {
  bool anchor_stage = false;
  double loss = 0.0;       // batch-mean loss before the update
  double grad_norm = 0.0;  // raw global norm before normalization
  double mask_ratio = 0.0; // mean input mask ratio
};

template <typename T>
struct InnerResult {
  BasicFastWeights<T> fast;
  std::vector<InnerStageRecord> stages;
  std::vector<InnerStagePlan> plan;
};

/// Builds the per-stage states. Anchor-consistent plans nest every pre-anchor
/// mask set over the anchor's; the inconsistent ablation draws an unrelated
/// masking per stage.
inline std::vector<InnerStagePlan> plan_inner_stages(const std::vector<Anchor>& batch, const InnerLoopConfig& cfg,
                                                     TokenId mask_id, Rng& rng) {
  const bool with_pre = cfg.stages != InnerStages::kAnchorOnly;
  const bool with_anchor = cfg.stages != InnerStages::kPreAnchorOnly;
  const std::size_t n_pre = with_pre ? cfg.k - 1 : 0;
  std::vector<InnerStagePlan> plan(n_pre + (with_anchor ? 1 : 0));
  if (plan.empty()) return plan;
  for (std::size_t j = 0; j < n_pre; ++j) plan[j].anchor_stage = false;
  if (with_anchor) plan.back().anchor_stage = true;

  for (const Anchor& a : batch) {
    if (cfg.trajectory == Trajectory::kAnchorConsistent) {
      const double t = a.state.mask_ratio();
      const double start = pre_anchor_ratio(t, cfg.s_pre);
      std::vector<NoisyState> pre(n_pre);
      const NoisyState* cur = &a.state;
      for (std::size_t j = n_pre; j-- > 0;) {
        const double ratio = start - (start - t) * double(j) / double(cfg.k - 1);
        pre[j] = further_mask(*cur, ratio, mask_id, rng);
        cur = &pre[j];
      }
      for (std::size_t j = 0; j < n_pre; ++j) {
        plan[j].input.push_back(pre[j]);
        plan[j].next.push_back(j + 1 < n_pre ? pre[j + 1] : a.state);
      }
      if (with_anchor) {
        plan.back().input.push_back(a.state);
        plan.back().next.push_back(a.state);
      }
    } else {
      std::vector<NoisyState> fresh;
      for (std::size_t j = 0; j < plan.size() + 1; ++j) {
        const double t = rng.uniform(cfg.t_min, 1.0);
        fresh.push_back(forward_mask(a.x0, t, a.state.prompt_len, mask_id, rng));
      }
      for (std::size_t j = 0; j < plan.size(); ++j) {
        plan[j].input.push_back(fresh[j]);
        plan[j].next.push_back(fresh[j + 1]);
      }
    }
  }
  return plan;
}

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  std::vector<BasicTensor<T>> grads;
};

/// Adds b into a elementwise; shapes must match.
template <typename T>
void accumulate(std::vector<BasicTensor<T>>& acc, const std::vector<BasicTensor<T>>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    auto dst = acc[i].data();
    auto src = g[i].data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

/// Batch-mean loss and gradients w.r.t. φ for one stage; per-member tapes
/// run in parallel and are reduced in index order.
template <typename T>
LossAndGrads<T> inner_stage_gradients(const BasicModel<T>& model, const BasicFastWeights<T>& fast,
                                      const InnerStagePlan& stage, const std::vector<Anchor>& batch,
                                      const InnerLoopConfig& cfg) {
  auto per = parallel_map(batch.size(), [&](std::size_t i) {
    std::optional<Teacher<T>> teacher;
    if (stage.anchor_stage && cfg.supervision != Supervision::kCrossEntropy) {
      teacher = make_teacher(model, &fast, stage.input[i], cfg.teacher_reveal);
    }
    ModelGraph<T> g(model, &fast, {.base = false, .fast = true});
    DiffTensor<T> loss = stage.anchor_stage
                             ? stage2_loss(g, stage.input[i], batch[i].x0, cfg.supervision,
                                           teacher ? &*teacher : nullptr)
                             : stage1_loss(g, stage.input[i], stage.next[i], batch[i].x0, cfg.stage1_target);
    g.backward(loss);
    return LossAndGrads<T>{double(loss.item()), g.fast_grads()};
  });
  LossAndGrads<T> out;
  for (auto& p : per) {
    out.loss += p.loss;
    accumulate(out.grads, p.grads);
  }
  const double inv = batch.empty() ? 0.0 : 1.0 / double(batch.size());
  out.loss *= inv;
  for (auto& g : out.grads)
    for (auto& v : g.data()) v = T(double(v) * inv);
  return out;
}

/// Runs the stages of `plan` on `fast` in place.
template <typename T>
std::vector<InnerStageRecord> run_inner_stages(const BasicModel<T>& model, BasicFastWeights<T>& fast,
                                               const std::vector<InnerStagePlan>& plan,
                                               const std::vector<Anchor>& batch, const InnerLoopConfig& cfg) {
  std::vector<InnerStageRecord> records;
  for (const auto& stage : plan) {
    LossAndGrads<T> lg = inner_stage_gradients(model, fast, stage, batch, cfg);
    InnerStageRecord rec;
    rec.anchor_stage = stage.anchor_stage;
    rec.loss = lg.loss;
    double gn = 0.0;
    for (const auto& g : lg.grads) gn += std::pow(l2_norm<T>(g.data()), 2);
    rec.grad_norm = std::sqrt(gn);
    for (const auto& s : stage.input) rec.mask_ratio += s.mask_ratio() / double(stage.input.size());
    records.push_back(rec);

    normalize_gradients(lg.grads, cfg.normalization, cfg.clip);
    auto params = fast.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p]->data();
      auto g = lg.grads[p].data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= T(cfg.eta) * g[j];
    }
  }
  return records;
}

/// Resets φ to φ₀, runs the (K−1) pre-anchor stages and the anchor-to-target
/// stage, and returns φ_K as plain values. θ is only read.
template <typename T>
InnerResult<T> inner_adapt(const BasicModel<T>& model, BasicFastWeights<T> fast, const std::vector<Anchor>& batch,
                           const InnerLoopConfig& cfg, Rng& rng) {
  cfg.validate();
  fast.reset();
  InnerResult<T> out;
  out.plan = plan_inner_stages(batch, cfg, model.vocab().mask_id(), rng);
  out.stages = run_inner_stages(model, fast, out.plan, batch, cfg);
  out.fast = std::move(fast);
  return out;
}

// ---------------------------------------------------------------------------
// Outer loop

/// Decoupled-weight-decay Adam.
template <typename T>
class AdamW {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  void init(const std::vector<BasicTensor<T>*>& params) {
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
    step_ = 0;
  }

  /// One update with learning rate `lr`. Rank-1 tensors (biases, norms) skip decay.
  void step(const std::vector<BasicTensor<T>*>& params, const std::vector<BasicTensor<T>>& grads, double lr) {
    if (m_.size() != params.size()) init(params);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p]->data();
      auto g = grads[p].data();
      auto m = m_[p].data();
      auto v = v_[p].data();
      const bool decay = params[p]->rank() >= 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = double(g[j]);
        m[j] = T(cfg_.beta1 * double(m[j]) + (1.0 - cfg_.beta1) * gj);
        v[j] = T(cfg_.beta2 * double(v[j]) + (1.0 - cfg_.beta2) * gj * gj);
        const double mhat = double(m[j]) / bc1;
        const double vhat = double(v[j]) / bc2;
        double wj = double(w[j]);
        if (decay) wj -= lr * cfg_.weight_decay * wj;
        wj -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[j] = T(wj);
      }
    }
  }

  std::size_t steps_taken() const { return step_; }
  void set_steps_taken(std::size_t s) { step_ = s; }
  std::vector<BasicTensor<T>>& first_moments() { return m_; }
  std::vector<BasicTensor<T>>& second_moments() { return v_; }
  const std::vector<BasicTensor<T>>& first_moments() const { return m_; }
  const std::vector<BasicTensor<T>>& second_moments() const { return v_; }

 private:
  Config cfg_;
  std::vector<BasicTensor<T>> m_, v_;
  std::size_t step_ = 0;
};

enum class LrSchedule { kCosine, kConstant };

/// Linear warmup over ⌈warmup·total⌉ steps, then cosine decay to zero.
inline double learning_rate(std::size_t step, std::size_t total, double base, double warmup, LrSchedule kind) {
  if (kind == LrSchedule::kConstant || total == 0) return base;
  const auto w = std::size_t(std::ceil(warmup * double(total)));
  if (step < w) return base * double(step + 1) / double(w);
  if (total <= w) return base;
  const double progress = double(step - w) / double(total - w);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct NumericFailure : NumericError {
  using NumericError::NumericError;
};

/// Batch-mean ω(t)-weighted masked loss and its gradient w.r.t. θ with φ
/// frozen. `fast` may be null (standard MDLM).
template <typename T>
LossAndGrads<T> outer_gradients(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                                const std::vector<Anchor>& batch, const NoiseSchedule& schedule) {
  auto per = parallel_map(batch.size(), [&](std::size_t i) {
    ModelGraph<T> g(model, fast, {.base = true, .fast = false});
    DiffTensor<T> loss = mdlm_loss(g.run(batch[i].state.tokens).logits, batch[i].x0, batch[i].state, schedule);
    g.backward(loss);
    return LossAndGrads<T>{double(loss.item()), g.base_grads()};
  });
  LossAndGrads<T> out;
  for (auto& p : per) {
    out.loss += p.loss;
    accumulate(out.grads, p.grads);
  }
  const double inv = batch.empty() ? 0.0 : 1.0 / double(batch.size());
  out.loss *= inv;
  for (auto& g : out.grads)
    for (auto& v : g.data()) v = T(double(v) * inv);
  return out;
}

/// Batch-mean objective value without gradients.
template <typename T>
double outer_loss_value(const BasicModel<T>& model, const BasicFastWeights<T>* fast, const std::vector<Anchor>& batch,
                        const NoiseSchedule& schedule) {
  auto per = parallel_map(batch.size(), [&](std::size_t i) {
    ModelGraph<T> g(model, fast, {});
    return double(mdlm_loss(g.run(batch[i].state.tokens).logits, batch[i].x0, batch[i].state, schedule).item());
  });
  double s = 0.0;
  for (double v : per) s += v;
  return batch.empty() ? 0.0 : s / double(batch.size());
}

/// Global-norm clip; returns the pre-clip norm.
template <typename T>
double clip_global_norm(std::vector<BasicTensor<T>>& grads, double max_norm) {
  double s = 0.0;
  for (const auto& g : grads)
    for (const T& v : g.data()) s += double(v) * double(v);
  const double n = std::sqrt(s);
  if (max_norm > 0.0 && n > max_norm) {
    const double f = max_norm / n;
    for (auto& g : grads)
      for (auto& v : g.data()) v = T(double(v) * f);
  }
  return n;
}

/// Outer low-rank mode: θ's linears are trained through W + s·A·B with the
/// base weights frozen. The merged model is materialized per step, so the
/// adapter gradient follows from the merged-weight gradient dW:
///   dA = s·dW·Bᵀ,  dB = s·Aᵀ·dW.
template <typename T>
class OuterAdapter {
 public:
  struct Entry {
    std::size_t layer = 0;
    LinearSlot slot = LinearSlot::kQuery;
    std::size_t param_index = 0;  // position of the weight in model.parameters()
    BasicTensor<T> a, b;
  };

  OuterAdapter() = default;

  static OuterAdapter create(const BasicModel<T>& model, std::size_t rank, double alpha, std::uint64_t seed) {
    if (rank == 0) throw ConfigError("outer adapter rank must be positive");
    OuterAdapter ad;
    ad.scaling_ = T(alpha / double(rank));
    const auto params = model.parameters();
    for (std::size_t l = 0; l < model.config().n_layers; ++l) {
      for (LinearSlot s : kAllSlots) {
        const std::string name = "blocks." + std::to_string(l) + "." + slot_name(s) + ".w";
        Entry e;
        e.layer = l;
        e.slot = s;
        for (std::size_t i = 0; i < params.size(); ++i) {
          if (params[i].name == name) e.param_index = i;
        }
        const auto& w = model.blocks()[l].w(s);
        e.a = BasicTensor<T>({w.dim(0), rank});
        e.b = BasicTensor<T>({rank, w.dim(1)});
        Rng rng(derive_seed(seed, Stream::kFastInit, 1000 + l, std::size_t(s)));
        const double bound = 1.0 / std::sqrt(double(w.dim(0)));
        for (auto& v : e.a.data()) v = T(rng.uniform(-bound, bound));
        ad.entries_.push_back(std::move(e));
      }
    }
    return ad;
  }

  BasicModel<T> merged(const BasicModel<T>& base) const {
    BasicModel<T> m = base;
    for (const auto& e : entries_) {
      auto& w = m.blocks()[e.layer].w(e.slot);
      detail::gemm(false, false, w.dim(0), w.dim(1), e.a.dim(1), scaling_, e.a.data().data(), e.a.dim(1),
                   e.b.data().data(), w.dim(1), w.data().data(), w.dim(1));
    }
    return m;
  }

  /// Adapter gradients from merged-model gradients aligned with parameters().
  std::vector<BasicTensor<T>> project(const std::vector<BasicTensor<T>>& model_grads) const {
    std::vector<BasicTensor<T>> out;
    for (const auto& e : entries_) {
      const auto& dw = model_grads.at(e.param_index);
      const std::size_t din = e.a.dim(0), r = e.a.dim(1), dout = e.b.dim(1);
      BasicTensor<T> ga({din, r}), gb({r, dout});
      detail::gemm(false, true, din, r, dout, scaling_, dw.data().data(), dout, e.b.data().data(), dout,
                   ga.data().data(), r);
      detail::gemm(true, false, r, dout, din, scaling_, e.a.data().data(), r, dw.data().data(), dout,
                   gb.data().data(), dout);
      out.push_back(std::move(ga));
      out.push_back(std::move(gb));
    }
    return out;
  }

  std::vector<BasicTensor<T>*> params() {
    std::vector<BasicTensor<T>*> out;
    for (auto& e : entries_) {
      out.push_back(&e.a);
      out.push_back(&e.b);
    }
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      const std::string p = "outer/blocks." + std::to_string(e.layer) + "." + slot_name(e.slot);
      out.push_back(p + ".A");
      out.push_back(p + ".B");
    }
    return out;
  }

  T scaling() const { return scaling_; }

 private:
  std::vector<Entry> entries_;
  T scaling_ = T(1);
};

}  // namespace memdlm
