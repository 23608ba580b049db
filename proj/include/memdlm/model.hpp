// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny bidirectional transformer denoiser with detachable low-rank fast weights.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "memdlm/autodiff.hpp"
#include "memdlm/rng.hpp"
#include "memdlm/tensor.hpp"

namespace memdlm {

/// Output classes are [0, V). The mask token sits one slot past the output
/// vocabulary and the pad token one further, so both are embeddable inputs
/// that the width-V head can never predict.
struct VocabSpec {
  std::size_t vocab_size = 64;

  TokenId mask_id() const { return TokenId(vocab_size); }
  TokenId pad_id() const { return TokenId(vocab_size + 1); }
  std::size_t embedding_rows() const { return vocab_size + 2; }
  bool is_output_class(TokenId id) const { return id >= 0 && std::size_t(id) < vocab_size; }
};

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t max_len = 256;
  std::size_t ffn_mult = 4;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  VocabSpec vocab() const { return VocabSpec{vocab_size}; }
  std::size_t d_ffn() const { return d_model * ffn_mult; }
};

enum class LinearSlot : std::size_t { kQuery, kKey, kValue, kOutput, kFfnUp, kFfnDown };
inline constexpr std::size_t kSlotsPerBlock = 6;
inline constexpr std::array<LinearSlot, kSlotsPerBlock> kAllSlots = {
    LinearSlot::kQuery, LinearSlot::kKey, LinearSlot::kValue,
    LinearSlot::kOutput, LinearSlot::kFfnUp, LinearSlot::kFfnDown};

inline bool is_ffn(LinearSlot s) { return s == LinearSlot::kFfnUp || s == LinearSlot::kFfnDown; }

inline const char* slot_name(LinearSlot s) {
  switch (s) {
    case LinearSlot::kQuery: return "attn.wq";
    case LinearSlot::kKey: return "attn.wk";
    case LinearSlot::kValue: return "attn.wv";
    case LinearSlot::kOutput: return "attn.wo";
    case LinearSlot::kFfnUp: return "ffn.fc1";
    case LinearSlot::kFfnDown: return "ffn.fc2";
  }
  return "?";
}

template <typename T>
struct BlockParams {
  BasicTensor<T> ln1_g, ln1_b;
  std::array<BasicTensor<T>, kSlotsPerBlock> weight;  // [d_in × d_out]
  std::array<BasicTensor<T>, kSlotsPerBlock> bias;    // [d_out]
  BasicTensor<T> ln2_g, ln2_b;

  BasicTensor<T>& w(LinearSlot s) { return weight[std::size_t(s)]; }
  const BasicTensor<T>& w(LinearSlot s) const { return weight[std::size_t(s)]; }
  BasicTensor<T>& b(LinearSlot s) { return bias[std::size_t(s)]; }
  const BasicTensor<T>& b(LinearSlot s) const { return bias[std::size_t(s)]; }
};

template <typename T>
struct NamedParam {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
struct ConstNamedParam {
  std::string name;
  const BasicTensor<T>* tensor;
};

/// Slow parameters θ.
template <typename T>
class BasicModel {
 public:
  BasicModel() = default;

  static BasicModel init(const ModelConfig& cfg) {
    if (cfg.d_model % cfg.n_heads != 0) {
      throw ConfigError("model.d_model must be divisible by model.n_heads");
    }
    if (cfg.vocab_size < 2 || cfg.n_layers == 0 || cfg.max_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    BasicModel m;
    m.cfg_ = cfg;
    Rng rng(derive_seed(cfg.seed, Stream::kInit));
    const std::size_t d = cfg.d_model, f = cfg.d_ffn();
    auto normal = [&](Shape s, double std) {
      BasicTensor<T> t(std::move(s));
      for (auto& v : t.data()) v = T(rng.normal() * std);
      return t;
    };
    const double proj_std = cfg.init_std / std::sqrt(2.0 * double(cfg.n_layers));
    m.tok_emb_ = normal({cfg.vocab().embedding_rows(), d}, cfg.init_std);
    m.pos_emb_ = normal({cfg.max_len, d}, cfg.init_std);
    m.blocks_.resize(cfg.n_layers);
    for (auto& blk : m.blocks_) {
      blk.ln1_g = BasicTensor<T>({d}, T(1));
      blk.ln1_b = BasicTensor<T>({d});
      blk.ln2_g = BasicTensor<T>({d}, T(1));
      blk.ln2_b = BasicTensor<T>({d});
      for (LinearSlot s : kAllSlots) {
        const std::size_t din = s == LinearSlot::kFfnDown ? f : d;
        const std::size_t dout = s == LinearSlot::kFfnUp ? f : d;
        const bool residual_out = s == LinearSlot::kOutput || s == LinearSlot::kFfnDown;
        blk.w(s) = normal({din, dout}, residual_out ? proj_std : cfg.init_std);
        blk.b(s) = BasicTensor<T>({dout});
      }
    }
    m.lnf_g_ = BasicTensor<T>({d}, T(1));
    m.lnf_b_ = BasicTensor<T>({d});
    m.head_ = normal({d, cfg.vocab_size}, cfg.init_std);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  VocabSpec vocab() const { return cfg_.vocab(); }

  BasicTensor<T>& tok_emb() { return tok_emb_; }
  const BasicTensor<T>& tok_emb() const { return tok_emb_; }
  BasicTensor<T>& pos_emb() { return pos_emb_; }
  const BasicTensor<T>& pos_emb() const { return pos_emb_; }
  std::vector<BlockParams<T>>& blocks() { return blocks_; }
  const std::vector<BlockParams<T>>& blocks() const { return blocks_; }
  const BasicTensor<T>& lnf_g() const { return lnf_g_; }
  const BasicTensor<T>& lnf_b() const { return lnf_b_; }
  const BasicTensor<T>& head() const { return head_; }

  /// Every θ tensor in a fixed order; names are the checkpoint keys.
  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    visit([&](std::string name, BasicTensor<T>& t) { out.push_back({std::move(name), &t}); });
    return out;
  }
  std::vector<ConstNamedParam<T>> parameters() const {
    std::vector<ConstNamedParam<T>> out;
    const_cast<BasicModel*>(this)->visit(
        [&](std::string name, BasicTensor<T>& t) { out.push_back({std::move(name), &t}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out = BasicModel<U>::init(cfg_);
    auto dst = out.parameters();
    auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
    return out;
  }

 private:
  template <typename F>
  void visit(F&& f) {
    f("tok_emb", tok_emb_);
    f("pos_emb", pos_emb_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& blk = blocks_[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      f(p + "ln1.g", blk.ln1_g);
      f(p + "ln1.b", blk.ln1_b);
      for (LinearSlot s : kAllSlots) {
        f(p + slot_name(s) + ".w", blk.w(s));
        f(p + slot_name(s) + ".b", blk.b(s));
      }
      f(p + "ln2.g", blk.ln2_g);
      f(p + "ln2.b", blk.ln2_b);
    }
    f("ln_f.g", lnf_g_);
    f("ln_f.b", lnf_b_);
    f("head", head_);
  }

  ModelConfig cfg_;
  BasicTensor<T> tok_emb_, pos_emb_;
  std::vector<BlockParams<T>> blocks_;
  BasicTensor<T> lnf_g_, lnf_b_, head_;
};

using Model = BasicModel<float>;

// ---------------------------------------------------------------------------
// Fast weights φ

enum class FastInit {
  kZeroProduct,  // A random, B zero: A·B = 0 but gradients flow
  kZeroBoth,     // A = B = 0: literal all-zeros; a stationary point of the adapter
};

struct FastWeightConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  double fraction = 0.25;  // final fraction of layers that carry adapters
  bool ffn_only = true;    // false: attention linears too
  bool full_param = false; // dense zero-initialized deltas instead of low-rank pairs
  FastInit init = FastInit::kZeroProduct;
  std::uint64_t seed = 0;
};

/// Indices of the last ⌈fraction·n_layers⌉ layers, ascending.
inline std::vector<std::size_t> targeted_layers(std::size_t n_layers, double fraction) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("fast-weight fraction must lie in [0, 1]");
  const auto count = std::size_t(std::ceil(fraction * double(n_layers) - 1e-9));
  std::vector<std::size_t> out;
  for (std::size_t l = n_layers - std::min(count, n_layers); l < n_layers; ++l) out.push_back(l);
  return out;
}

template <typename T>
class BasicFastWeights {
 public:
  struct Entry {
    std::size_t layer = 0;
    LinearSlot slot = LinearSlot::kFfnUp;
    BasicTensor<T> a;  // [d_in × r], or the dense delta [d_in × d_out] in full-param mode
    BasicTensor<T> b;  // [r × d_out]; empty in full-param mode
  };

  BasicFastWeights() = default;

  static BasicFastWeights create(const ModelConfig& mc, const FastWeightConfig& fc) {
    if (!fc.full_param && fc.rank == 0) throw ConfigError("fast-weight rank must be positive");
    BasicFastWeights fw;
    fw.cfg_ = fc;
    fw.scaling_ = fc.full_param ? T(1) : T(fc.alpha / double(fc.rank));
    const std::size_t d = mc.d_model, f = mc.d_ffn();
    for (std::size_t layer : targeted_layers(mc.n_layers, fc.fraction)) {
      for (LinearSlot s : kAllSlots) {
        if (fc.ffn_only && !is_ffn(s)) continue;
        const std::size_t din = s == LinearSlot::kFfnDown ? f : d;
        const std::size_t dout = s == LinearSlot::kFfnUp ? f : d;
        Entry e;
        e.layer = layer;
        e.slot = s;
        if (fc.full_param) {
          e.a = BasicTensor<T>({din, dout});
        } else {
          e.a = BasicTensor<T>({din, fc.rank});
          e.b = BasicTensor<T>({fc.rank, dout});
          if (fc.init == FastInit::kZeroProduct) {
            Rng rng(derive_seed(fc.seed, Stream::kFastInit, layer, std::size_t(s)));
            const double bound = 1.0 / std::sqrt(double(din));
            for (auto& v : e.a.data()) v = T(rng.uniform(-bound, bound));
          }
        }
        fw.entries_.push_back(std::move(e));
      }
    }
    fw.initial_ = fw.entries_;
    return fw;
  }

  /// Restores φ₀ exactly.
  void reset() {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      entries_[i].a = initial_[i].a;
      entries_[i].b = initial_[i].b;
    }
  }

  /// Makes the current values the reset point.
  void commit_initial() { initial_ = entries_; }

  const FastWeightConfig& config() const { return cfg_; }
  T scaling() const { return scaling_; }
  bool full_param() const { return cfg_.full_param; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Entry* find(std::size_t layer, LinearSlot slot) const {
    for (const auto& e : entries_) {
      if (e.layer == layer && e.slot == slot) return &e;
    }
    return nullptr;
  }

  /// φ in optimizer order: layer, then slot, then A before B.
  std::vector<BasicTensor<T>*> params() {
    std::vector<BasicTensor<T>*> out;
    for (auto& e : entries_) {
      out.push_back(&e.a);
      if (!cfg_.full_param) out.push_back(&e.b);
    }
    return out;
  }
  std::vector<const BasicTensor<T>*> params() const {
    std::vector<const BasicTensor<T>*> out;
    for (const auto& e : entries_) {
      out.push_back(&e.a);
      if (!cfg_.full_param) out.push_back(&e.b);
    }
    return out;
  }

  /// Checkpoint names, aligned with params().
  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      const std::string p = "fast/blocks." + std::to_string(e.layer) + "." + slot_name(e.slot);
      if (cfg_.full_param) {
        out.push_back(p + ".delta");
      } else {
        out.push_back(p + ".A");
        out.push_back(p + ".B");
      }
    }
    return out;
  }

  /// True when every adapter contributes an exactly zero weight delta.
  bool delta_is_zero() const {
    for (const auto& e : entries_) {
      if (cfg_.full_param ? !e.a.all_zero() : !e.b.all_zero() && !e.a.all_zero()) return false;
    }
    return true;
  }

  template <typename U>
  BasicFastWeights<U> cast() const;

 private:
  template <typename>
  friend class BasicFastWeights;

  FastWeightConfig cfg_;
  T scaling_ = T(1);
  std::vector<Entry> entries_;
  std::vector<Entry> initial_;
};

template <typename T>
template <typename U>
BasicFastWeights<U> BasicFastWeights<T>::cast() const {
  BasicFastWeights<U> out;
  out.cfg_ = cfg_;
  out.scaling_ = U(scaling_);
  auto conv = [](const std::vector<Entry>& src) {
    std::vector<typename BasicFastWeights<U>::Entry> dst;
    for (const auto& e : src) {
      typename BasicFastWeights<U>::Entry d;
      d.layer = e.layer;
      d.slot = e.slot;
      d.a = e.a.template cast<U>();
      d.b = e.b.template cast<U>();
      dst.push_back(std::move(d));
    }
    return dst;
  };
  out.entries_ = conv(entries_);
  out.initial_ = conv(initial_);
  return out;
}

using FastWeights = BasicFastWeights<float>;

template <typename T>
std::vector<BasicTensor<T>*> collect_fast_params(BasicFastWeights<T>& fast) {
  return fast.params();
}

// ---------------------------------------------------------------------------
// Forward pass

struct GradTargets {
  bool base = false;
  bool fast = false;
};

template <typename T>
struct ForwardOutput {
  DiffTensor<T> hidden;  // [L × d], after the final layer norm
  DiffTensor<T> logits;  // [L × V]
};

/// One differentiation pass: binds θ (and optionally φ) as leaves of a fresh
/// tape, runs any number of forwards, and reads gradients back after backward.
template <typename T>
class ModelGraph {
 public:
  ModelGraph(const BasicModel<T>& model, const BasicFastWeights<T>* fast, GradTargets grads)
      : tape_(grads.base || grads.fast), model_(model), fast_(fast) {
    for (const auto& p : model.parameters()) base_leaves_.push_back(tape_.leaf(*p.tensor, grads.base));
    const std::size_t n_layers = model.config().n_layers;
    fast_index_.assign(n_layers * kSlotsPerBlock, -1);
    if (fast) {
      const auto& entries = fast->entries();
      for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.layer >= n_layers) throw ConfigError("fast weights target a layer the model does not have");
        fast_index_[e.layer * kSlotsPerBlock + std::size_t(e.slot)] = int(i);
        fast_a_.push_back(tape_.leaf(e.a, grads.fast));
        fast_b_.push_back(fast->full_param() ? DiffTensor<T>() : tape_.leaf(e.b, grads.fast));
      }
    }
  }

  Tape<T>& tape() { return tape_; }

  ForwardOutput<T> run(std::span<const TokenId> tokens, bool with_logits = true) {
    const ModelConfig& cfg = model_.config();
    if (tokens.empty()) throw LengthError("forward: empty sequence");
    if (tokens.size() > cfg.max_len) {
      throw LengthError("forward: sequence of " + std::to_string(tokens.size()) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
    }
    const std::size_t rows = cfg.vocab().embedding_rows();
    for (TokenId id : tokens) {
      if (id < 0 || std::size_t(id) >= rows) {
        throw VocabularyError("forward: token id " + std::to_string(id) + " is not in the input vocabulary");
      }
    }
    std::vector<TokenId> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = TokenId(i);

    std::size_t li = 0;
    auto next = [&]() -> const DiffTensor<T>& { return base_leaves_[li++]; };
    const auto& tok = next();
    const auto& pos = next();
    DiffTensor<T> x = add(embedding_lookup(tok, tokens), embedding_lookup(pos, positions));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& ln1_g = next();
      const auto& ln1_b = next();
      std::array<const DiffTensor<T>*, kSlotsPerBlock> w{}, b{};
      for (std::size_t s = 0; s < kSlotsPerBlock; ++s) {
        w[s] = &next();
        b[s] = &next();
      }
      const auto& ln2_g = next();
      const auto& ln2_b = next();
      auto linear = [&](const DiffTensor<T>& in, LinearSlot slot) {
        const std::size_t s = std::size_t(slot);
        DiffTensor<T> y = add_rowwise(matmul(in, *w[s]), *b[s]);
        const int fi = fast_index_[l * kSlotsPerBlock + s];
        if (fi >= 0) {
          if (fast_->full_param()) {
            y = add(y, matmul(in, fast_a_[fi]));
          } else {
            y = add(y, scale(matmul(matmul(in, fast_a_[fi]), fast_b_[fi]), fast_->scaling()));
          }
        }
        return y;
      };
      DiffTensor<T> h = layer_norm(x, ln1_g, ln1_b);
      DiffTensor<T> att = self_attention(linear(h, LinearSlot::kQuery), linear(h, LinearSlot::kKey),
                                         linear(h, LinearSlot::kValue), cfg.n_heads);
      x = add(x, linear(att, LinearSlot::kOutput));
      DiffTensor<T> h2 = layer_norm(x, ln2_g, ln2_b);
      x = add(x, linear(gelu(linear(h2, LinearSlot::kFfnUp)), LinearSlot::kFfnDown));
    }
    const auto& lnf_g = next();
    const auto& lnf_b = next();
    const auto& head = next();
    ForwardOutput<T> out;
    out.hidden = layer_norm(x, lnf_g, lnf_b);
    if (with_logits) out.logits = matmul(out.hidden, head);
    return out;
  }

  void backward(const DiffTensor<T>& loss) { tape_.backward(loss); }

  /// Gradients aligned with model.parameters(); zeros where none arrived.
  std::vector<BasicTensor<T>> base_grads() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& leaf : base_leaves_) out.push_back(grad_or_zero(leaf));
    return out;
  }

  /// Gradients aligned with fast.params().
  std::vector<BasicTensor<T>> fast_grads() const {
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < fast_a_.size(); ++i) {
      out.push_back(grad_or_zero(fast_a_[i]));
      if (fast_b_[i].valid()) out.push_back(grad_or_zero(fast_b_[i]));
    }
    return out;
  }

 private:
  static BasicTensor<T> grad_or_zero(const DiffTensor<T>& leaf) {
    BasicTensor<T> g(leaf.shape());
    if (auto gv = leaf.grad()) std::copy(gv->begin(), gv->end(), g.data().begin());
    return g;
  }

  Tape<T> tape_;
  const BasicModel<T>& model_;
  const BasicFastWeights<T>* fast_;
  std::vector<DiffTensor<T>> base_leaves_;
  std::vector<DiffTensor<T>> fast_a_, fast_b_;
  std::vector<int> fast_index_;
};

/// Logits [L × V] without recording gradients.
template <typename T>
BasicTensor<T> forward_logits(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                              std::span<const TokenId> tokens) {
  ModelGraph<T> g(model, fast, {});
  return g.run(tokens).logits.to_tensor();
}

/// Final hidden states [L × d] without recording gradients.
template <typename T>
BasicTensor<T> forward_hidden(const BasicModel<T>& model, const BasicFastWeights<T>* fast,
                              std::span<const TokenId> tokens) {
  ModelGraph<T> g(model, fast, {});
  return g.run(tokens, false).hidden.to_tensor();
}

}  // namespace memdlm
