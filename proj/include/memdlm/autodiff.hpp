// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode autodiff. A Tape records one forward pass; each
// DiffTensor is a handle to a node on it. Tapes share nothing, so independent
// passes (inner loop w.r.t. fast weights, outer loop w.r.t. base weights, or
// one tape per batch member on a worker thread) never interfere.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <cblas.h>

#include "memdlm/tensor.hpp"

namespace memdlm {

template <typename T>
class Tape;

template <typename T>
class DiffTensor {
 public:
  DiffTensor() = default;
  DiffTensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Shape& shape() const { return tape_->node(id_).shape; }
  std::size_t numel() const { return tape_->node(id_).numel; }
  std::span<const T> value() const { return tape_->value(id_); }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar of shape " + shape_str(shape()));
    return value()[0];
  }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  std::optional<std::span<const T>> grad() const { return tape_->grad(id_); }
  BasicTensor<T> to_tensor() const {
    auto v = value();
    return BasicTensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
  }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Shape shape;
    std::size_t numel = 0;
    std::vector<T> owned;
    const T* external = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    Backward backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf that references caller-owned storage; `t` must outlive the tape.
  DiffTensor<T> leaf(const BasicTensor<T>& t, bool requires_grad) {
    Node n;
    n.shape = t.shape();
    n.numel = t.size();
    n.external = t.data().data();
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
  }

  /// Leaf holding its own copy of the data.
  DiffTensor<T> constant(BasicTensor<T> t, bool requires_grad = false) {
    Node n;
    n.shape = t.shape();
    n.numel = t.size();
    n.owned = std::move(t.storage());
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
  }

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  DiffTensor<T> record(Shape shape, std::vector<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.numel = shape_numel(shape);
    if (n.numel != value.size()) {
      throw DimensionError("op produced " + std::to_string(value.size()) + " values for shape " +
                           shape_str(shape));
    }
    n.shape = std::move(shape);
    n.owned = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }

  std::span<const T> value(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.external) return {n.external, n.numel};
    return n.owned;
  }

  std::optional<std::span<const T>> grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) return std::nullopt;
    return std::span<const T>(n.grad);
  }

  /// Gradient accumulator for an input during backward; allocated on first use.
  /// Returns an empty span for nodes that do not require a gradient.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.numel, T(0));
    return n.grad;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse sweep from a scalar. Visits every node at most once, newest first.
  void backward(const DiffTensor<T>& loss) {
    if (loss.tape() != this) throw Error("backward called with a tensor from another tape");
    if (backward_done_) throw Error("backward already run on this tape");
    backward_done_ = true;
    Node& root = nodes_[loss.id()];
    if (root.numel != 1) throw DimensionError("backward requires a scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) return;
    root.grad.assign(1, T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

 private:
  DiffTensor<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return DiffTensor<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  if (a.tape() != b.tape()) throw Error("operands live on different tapes");
  return *a.tape();
}

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(s));
}

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
  for (const T& x : v) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN in input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// BLAS runs single-threaded; parallelism lives in parallel_map, and a fixed
/// BLAS thread count keeps results independent of the worker count.
inline void blas_init_once() {
  static const bool done = (openblas_set_num_threads(1), true);
  (void)done;
}

/// C[m×n] += α·op(A)·op(B), row-major with explicit leading dimensions;
/// op(X) = Xᵀ when the flag is set.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* A,
                 std::size_t lda, const float* B, std::size_t ldb, float* C, std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
  blas_init_once();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
              alpha, A, int(lda), B, int(ldb), 1.0f, C, int(ldc));
}
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* A,
                 std::size_t lda, const double* B, std::size_t ldb, double* C, std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
  blas_init_once();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
              alpha, A, int(lda), B, int(ldb), 1.0, C, int(ldc));
}

/// Dense contiguous case.
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C) {
  gemm(ta, tb, m, n, k, T(1), A, ta ? m : k, B, tb ? k : n, C, n);
}

}  // namespace detail

template <typename T>
DiffTensor<T> matmul(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  detail::require_rank2(sa, "matmul");
  detail::require_rank2(sb, "matmul");
  if (sa[1] != sb[0]) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<T> out(m * n, T(0));
  detail::gemm(false, false, m, n, k, a.value().data(), b.value().data(), out.data());
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = a.requires_grad() || b.requires_grad();
  return tape.record({m, n}, std::move(out), rg, [ia, ib, m, k, n](Tape<T>& tp, std::size_t self) {
    const T* G = tp.grad(self)->data();
    if (auto ga = tp.grad_buffer(ia); !ga.empty()) {
      detail::gemm(false, true, m, k, n, G, tp.value(ib).data(), ga.data());  // dA += G·Bᵀ
    }
    if (auto gb = tp.grad_buffer(ib); !gb.empty()) {
      detail::gemm(true, false, k, n, m, tp.value(ia).data(), G, gb.data());  // dB += Aᵀ·G
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise kit

template <typename T>
DiffTensor<T> add(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  auto va = a.value();
  auto vb = b.value();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& tp, std::size_t self) {
                       auto g = *tp.grad(self);
                       for (std::size_t in : {ia, ib}) {
                         if (auto gi = tp.grad_buffer(in); !gi.empty()) {
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                         }
                       }
                     });
}

/// x[m×n] + bias[n] broadcast over rows.
template <typename T>
DiffTensor<T> add_rowwise(const DiffTensor<T>& x, const DiffTensor<T>& bias) {
  Tape<T>& tape = detail::same_tape(x, bias);
  detail::require_rank2(x.shape(), "add_rowwise");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.numel() != n || bias.shape().size() != 1) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  auto vx = x.value();
  auto vb = bias.value();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = vx[i * n + j] + vb[j];
  const std::size_t ix = x.id(), ibias = bias.id();
  return tape.record(x.shape(), std::move(out), x.requires_grad() || bias.requires_grad(),
                     [ix, ibias, m, n](Tape<T>& tp, std::size_t self) {
                       auto g = *tp.grad(self);
                       if (auto gx = tp.grad_buffer(ix); !gx.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (auto gb = tp.grad_buffer(ibias); !gb.empty()) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                       }
                     });
}

template <typename T>
DiffTensor<T> scale(const DiffTensor<T>& x, T s) {
  Tape<T>& tape = *x.tape();
  auto vx = x.value();
  std::vector<T> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * s;
  const std::size_t ix = x.id();
  return tape.record(x.shape(), std::move(out), x.requires_grad(), [ix, s](Tape<T>& tp, std::size_t self) {
    auto g = *tp.grad(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

template <typename T>
DiffTensor<T> mul(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  auto va = a.value();
  auto vb = b.value();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& tp, std::size_t self) {
                       auto g = *tp.grad(self);
                       if (auto ga = tp.grad_buffer(ia); !ga.empty()) {
                         auto vb = tp.value(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                       }
                       if (auto gb = tp.grad_buffer(ib); !gb.empty()) {
                         auto va = tp.value(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                       }
                     });
}

template <typename T>
DiffTensor<T> sum(const DiffTensor<T>& x) {
  Tape<T>& tape = *x.tape();
  T s = T(0);
  for (const T& v : x.value()) s += v;
  const std::size_t ix = x.id();
  return tape.record({}, {s}, x.requires_grad(), [ix](Tape<T>& tp, std::size_t self) {
    const T g = (*tp.grad(self))[0];
    for (T& v : tp.grad_buffer(ix)) v += g;
  });
}

/// Sum of scalars, in argument order.
template <typename T>
DiffTensor<T> add_scalars(const std::vector<DiffTensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("add_scalars: no operands");
  DiffTensor<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm; gamma/beta may be invalid handles for the pre-affine form.
template <typename T>
DiffTensor<T> layer_norm(const DiffTensor<T>& x, const DiffTensor<T>& gamma = {}, const DiffTensor<T>& beta = {}) {
  Tape<T>& tape = *x.tape();
  detail::require_rank2(x.shape(), "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  const bool affine = gamma.valid();
  if (affine && (gamma.numel() != n || !beta.valid() || beta.numel() != n)) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  }
  auto vx = x.value();
  std::vector<T> xhat(m * n), rstd(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = vx.data() + i * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= T(n);
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[i] = r;
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (row[j] - mean) * r;
  }
  if (affine) {
    auto g = gamma.value();
    auto b = beta.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xhat[i * n + j] * g[j] + b[j];
  } else {
    out = xhat;
  }
  const std::size_t ix = x.id();
  const std::size_t ig = affine ? gamma.id() : 0, ib = affine ? beta.id() : 0;
  const bool rg = x.requires_grad() || (affine && (gamma.requires_grad() || beta.requires_grad()));
  return tape.record(x.shape(), std::move(out), rg,
                     [ix, ig, ib, affine, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](
                         Tape<T>& tp, std::size_t self) {
                       auto g = *tp.grad(self);
                       std::span<const T> gv;
                       if (affine) {
                         gv = tp.value(ig);
                         if (auto gg = tp.grad_buffer(ig); !gg.empty()) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                         }
                         if (auto gb = tp.grad_buffer(ib); !gb.empty()) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                         }
                       }
                       auto gx = tp.grad_buffer(ix);
                       if (gx.empty()) return;
                       std::vector<T> dxhat(n);
                       for (std::size_t i = 0; i < m; ++i) {
                         T mean_d = T(0), mean_dx = T(0);
                         for (std::size_t j = 0; j < n; ++j) {
                           const T d = affine ? g[i * n + j] * gv[j] : g[i * n + j];
                           dxhat[j] = d;
                           mean_d += d;
                           mean_dx += d * xhat[i * n + j];
                         }
                         mean_d /= T(n);
                         mean_dx /= T(n);
                         for (std::size_t j = 0; j < n; ++j) {
                           gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                         }
                       }
                     });
}

/// tanh-approximated GELU.
template <typename T>
DiffTensor<T> gelu(const DiffTensor<T>& x) {
  Tape<T>& tape = *x.tape();
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  auto vx = x.value();
  std::vector<T> out(vx.size());
  std::vector<T> th(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = vx[i];
    th[i] = std::tanh(kC * (v + kA * v * v * v));
    out[i] = T(0.5) * v * (T(1) + th[i]);
  }
  const std::size_t ix = x.id();
  const bool rg = x.requires_grad() && tape.grad_enabled();
  if (!rg) th.clear();
  return tape.record(x.shape(), std::move(out), rg, [ix, th = std::move(th)](Tape<T>& tp, std::size_t self) {
    auto g = *tp.grad(self);
    auto vx = tp.value(ix);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = vx[i];
      const T d = T(0.5) * (T(1) + th[i]) + T(0.5) * v * (T(1) - th[i] * th[i]) * kC * (T(1) + T(3) * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

/// Rows of `table` selected by `ids`.
template <typename T>
DiffTensor<T> embedding_lookup(const DiffTensor<T>& table, std::span<const TokenId> ids) {
  Tape<T>& tape = *table.tape();
  detail::require_rank2(table.shape(), "embedding_lookup");
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  auto vt = table.value();
  std::vector<T> out(ids.size() * d);
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= rows) {
      throw VocabularyError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(rows) + " rows");
    }
    idx[i] = std::size_t(ids[i]);
    std::copy_n(vt.data() + idx[i] * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id();
  return tape.record({ids.size(), d}, std::move(out), table.requires_grad(),
                     [it, d, idx = std::move(idx)](Tape<T>& tp, std::size_t self) {
                       auto g = *tp.grad(self);
                       auto gt = tp.grad_buffer(it);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
                     });
}

namespace detail {

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T s = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  const T inv = T(1) / s;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

template <typename T>
T log_sum_exp(const T* in, std::size_t n) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T s = T(0);
  for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - mx);
  return mx + std::log(s);
}

}  // namespace detail

template <typename T>
DiffTensor<T> softmax_rows(const DiffTensor<T>& x) {
  Tape<T>& tape = *x.tape();
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw DimensionError("softmax_rows: needs n >= 1, got " + shape_str(s));
  auto vx = x.value();
  detail::check_finite(vx, "softmax_rows");
  const std::size_t n = s.back(), m = vx.size() / n;
  std::vector<T> out(vx.size());
  for (std::size_t i = 0; i < m; ++i) detail::softmax_row(vx.data() + i * n, out.data() + i * n, n);
  const std::size_t ix = x.id();
  return tape.record(s, std::move(out), x.requires_grad(), [ix, m, n](Tape<T>& tp, std::size_t self) {
    auto g = *tp.grad(self);
    auto y = tp.value(self);
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Bidirectional multi-head attention over [L×d] projections; no causal mask.
template <typename T>
DiffTensor<T> self_attention(const DiffTensor<T>& q, const DiffTensor<T>& k, const DiffTensor<T>& v,
                             std::size_t n_heads) {
  Tape<T>& tape = detail::same_tape(q, k);
  detail::same_tape(q, v);
  detail::require_rank2(q.shape(), "self_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("self_attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t L = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("self_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  const T sc = T(1) / std::sqrt(T(dh));
  const T* Q = q.value().data();
  const T* K = k.value().data();
  const T* V = v.value().data();
  std::vector<T> probs(n_heads * L * L);
  std::vector<T> out(L * d, T(0));
  std::vector<T> scores(L * L);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    std::fill(scores.begin(), scores.end(), T(0));
    detail::gemm(false, true, L, L, dh, sc, Q + off, d, K + off, d, scores.data(), L);
    T* p = probs.data() + h * L * L;
    for (std::size_t i = 0; i < L; ++i) detail::softmax_row(scores.data() + i * L, p + i * L, L);
    detail::gemm(false, false, L, dh, L, T(1), p, L, V + off, d, out.data() + off, d);
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return tape.record(q.shape(), std::move(out), rg,
                     [iq, ik, iv, L, d, dh, n_heads, sc, probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
                       const T* G = tp.grad(self)->data();
                       const T* Q = tp.value(iq).data();
                       const T* K = tp.value(ik).data();
                       const T* V = tp.value(iv).data();
                       auto gq = tp.grad_buffer(iq);
                       auto gk = tp.grad_buffer(ik);
                       auto gv = tp.grad_buffer(iv);
                       std::vector<T> ds(L * L);
                       for (std::size_t h = 0; h < n_heads; ++h) {
                         const std::size_t off = h * dh;
                         const T* p = probs.data() + h * L * L;
                         if (!gv.empty()) detail::gemm(true, false, L, dh, L, T(1), p, L, G + off, d, gv.data() + off, d);
                         if (gq.empty() && gk.empty()) continue;
                         std::fill(ds.begin(), ds.end(), T(0));
                         detail::gemm(false, true, L, L, dh, T(1), G + off, d, V + off, d, ds.data(), L);  // dP
                         for (std::size_t i = 0; i < L; ++i) {
                           T* row = ds.data() + i * L;
                           const T* pi = p + i * L;
                           T dot = T(0);
                           for (std::size_t j = 0; j < L; ++j) dot += row[j] * pi[j];
                           for (std::size_t j = 0; j < L; ++j) row[j] = pi[j] * (row[j] - dot) * sc;
                         }
                         if (!gq.empty()) detail::gemm(false, false, L, dh, L, T(1), ds.data(), L, K + off, d, gq.data() + off, d);
                         if (!gk.empty()) detail::gemm(true, false, L, dh, L, T(1), ds.data(), L, Q + off, d, gk.data() + off, d);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Losses. All return a scalar SUM over the listed positions; an empty position
// list gives an exact zero whose gradient is zero.

/// Σ_{i∈positions} −log softmax(logits[i])[targets[i]].
template <typename T>
DiffTensor<T> cross_entropy_masked(const DiffTensor<T>& logits, std::span<const TokenId> targets,
                                   std::span<const std::size_t> positions) {
  Tape<T>& tape = *logits.tape();
  detail::require_rank2(logits.shape(), "cross_entropy_masked");
  const std::size_t L = logits.shape()[0], V = logits.shape()[1];
  auto z = logits.value();
  T total = T(0);
  for (std::size_t p : positions) {
    if (p >= L) throw BoundsError("cross_entropy_masked: position " + std::to_string(p) + " >= " + std::to_string(L));
    if (p >= targets.size() || targets[p] < 0 || std::size_t(targets[p]) >= V) {
      throw VocabularyError("cross_entropy_masked: target at position " + std::to_string(p) +
                            " is not an output class");
    }
    const T* row = z.data() + p * V;
    total += detail::log_sum_exp(row, V) - row[targets[p]];
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  std::vector<TokenId> tgt;
  tgt.reserve(pos.size());
  for (std::size_t p : pos) tgt.push_back(targets[p]);
  const std::size_t il = logits.id();
  return tape.record({}, {total}, logits.requires_grad(),
                     [il, V, pos = std::move(pos), tgt = std::move(tgt)](Tape<T>& tp, std::size_t self) {
                       const T g = (*tp.grad(self))[0];
                       auto z = tp.value(il);
                       auto gz = tp.grad_buffer(il);
                       std::vector<T> pr(V);
                       for (std::size_t n = 0; n < pos.size(); ++n) {
                         const std::size_t p = pos[n];
                         detail::softmax_row(z.data() + p * V, pr.data(), V);
                         pr[tgt[n]] -= T(1);
                         for (std::size_t j = 0; j < V; ++j) gz[p * V + j] += g * pr[j];
                       }
                     });
}

enum class KlDirection { kForward, kReverse };

/// Σ_i KL(p_T‖p_S) (forward) or KL(p_S‖p_T) (reverse) with a frozen teacher.
template <typename T>
DiffTensor<T> kl_masked(const DiffTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                        std::span<const std::size_t> positions, KlDirection dir) {
  Tape<T>& tape = *student_logits.tape();
  detail::require_rank2(student_logits.shape(), "kl_masked");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("kl_masked: teacher " + shape_str(teacher_logits.shape()) + " vs student " +
                         shape_str(student_logits.shape()));
  }
  const std::size_t L = student_logits.shape()[0], V = student_logits.shape()[1];
  auto zs = student_logits.value();
  auto zt = teacher_logits.data();
  // Cache log-probabilities for the backward pass.
  std::vector<T> log_ps(positions.size() * V), log_pt(positions.size() * V);
  T total = T(0);
  for (std::size_t n = 0; n < positions.size(); ++n) {
    const std::size_t p = positions[n];
    if (p >= L) throw BoundsError("kl_masked: position " + std::to_string(p) + " >= " + std::to_string(L));
    const T lse_s = detail::log_sum_exp(zs.data() + p * V, V);
    const T lse_t = detail::log_sum_exp(zt.data() + p * V, V);
    for (std::size_t j = 0; j < V; ++j) {
      const T ls = zs[p * V + j] - lse_s;
      const T lt = zt[p * V + j] - lse_t;
      log_ps[n * V + j] = ls;
      log_pt[n * V + j] = lt;
      total += dir == KlDirection::kForward ? std::exp(lt) * (lt - ls) : std::exp(ls) * (ls - lt);
    }
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  const std::size_t is = student_logits.id();
  return tape.record({}, {total}, student_logits.requires_grad(),
                     [is, V, dir, pos = std::move(pos), log_ps = std::move(log_ps), log_pt = std::move(log_pt)](
                         Tape<T>& tp, std::size_t self) {
                       const T g = (*tp.grad(self))[0];
                       auto gz = tp.grad_buffer(is);
                       for (std::size_t n = 0; n < pos.size(); ++n) {
                         const T* ls = log_ps.data() + n * V;
                         const T* lt = log_pt.data() + n * V;
                         T* dst = gz.data() + pos[n] * V;
                         if (dir == KlDirection::kForward) {
                           for (std::size_t j = 0; j < V; ++j) dst[j] += g * (std::exp(ls[j]) - std::exp(lt[j]));
                         } else {
                           T row_kl = T(0);
                           for (std::size_t j = 0; j < V; ++j) row_kl += std::exp(ls[j]) * (ls[j] - lt[j]);
                           for (std::size_t j = 0; j < V; ++j) {
                             dst[j] += g * std::exp(ls[j]) * (ls[j] - lt[j] - row_kl);
                           }
                         }
                       }
                     });
}

/// Σ_i (1 − cos(h_s[i], h_t[i])) against frozen teacher states.
template <typename T>
DiffTensor<T> cosine_distance_masked(const DiffTensor<T>& student, const BasicTensor<T>& teacher,
                                     std::span<const std::size_t> positions) {
  Tape<T>& tape = *student.tape();
  detail::require_rank2(student.shape(), "cosine_distance_masked");
  if (teacher.shape() != student.shape()) {
    throw DimensionError("cosine_distance_masked: teacher " + shape_str(teacher.shape()) + " vs student " +
                         shape_str(student.shape()));
  }
  constexpr T kEps = T(1e-12);
  const std::size_t L = student.shape()[0], d = student.shape()[1];
  auto a = student.value();
  auto b = teacher.data();
  T total = T(0);
  for (std::size_t p : positions) {
    if (p >= L) throw BoundsError("cosine_distance_masked: position out of range");
    T ab = T(0), aa = T(0), bb = T(0);
    for (std::size_t c = 0; c < d; ++c) {
      ab += a[p * d + c] * b[p * d + c];
      aa += a[p * d + c] * a[p * d + c];
      bb += b[p * d + c] * b[p * d + c];
    }
    total += T(1) - ab / std::max(std::sqrt(aa) * std::sqrt(bb), kEps);
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  BasicTensor<T> tcopy = teacher;
  const std::size_t is = student.id();
  return tape.record({}, {total}, student.requires_grad(),
                     [is, d, pos = std::move(pos), tcopy = std::move(tcopy)](Tape<T>& tp, std::size_t self) {
                       const T g = (*tp.grad(self))[0];
                       auto a = tp.value(is);
                       auto b = tcopy.data();
                       auto ga = tp.grad_buffer(is);
                       for (std::size_t p : pos) {
                         T ab = T(0), aa = T(0), bb = T(0);
                         for (std::size_t c = 0; c < d; ++c) {
                           ab += a[p * d + c] * b[p * d + c];
                           aa += a[p * d + c] * a[p * d + c];
                           bb += b[p * d + c] * b[p * d + c];
                         }
                         const T na = std::sqrt(aa), nb = std::sqrt(bb);
                         if (na * nb < kEps) continue;
                         for (std::size_t c = 0; c < d; ++c) {
                           const T dcos = b[p * d + c] / (na * nb) - ab * a[p * d + c] / (aa * na * nb);
                           ga[p * d + c] -= g * dcos;
                         }
                       }
                     });
}

/// Σ_i mean_c (h_s[i,c] − h_t[i,c])² against frozen teacher states.
template <typename T>
DiffTensor<T> mse_masked(const DiffTensor<T>& student, const BasicTensor<T>& teacher,
                         std::span<const std::size_t> positions) {
  Tape<T>& tape = *student.tape();
  detail::require_rank2(student.shape(), "mse_masked");
  if (teacher.shape() != student.shape()) {
    throw DimensionError("mse_masked: teacher " + shape_str(teacher.shape()) + " vs student " +
                         shape_str(student.shape()));
  }
  const std::size_t L = student.shape()[0], d = student.shape()[1];
  auto a = student.value();
  auto b = teacher.data();
  T total = T(0);
  for (std::size_t p : positions) {
    if (p >= L) throw BoundsError("mse_masked: position out of range");
    T s = T(0);
    for (std::size_t c = 0; c < d; ++c) {
      const T diff = a[p * d + c] - b[p * d + c];
      s += diff * diff;
    }
    total += s / T(d);
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  BasicTensor<T> tcopy = teacher;
  const std::size_t is = student.id();
  return tape.record({}, {total}, student.requires_grad(),
                     [is, d, pos = std::move(pos), tcopy = std::move(tcopy)](Tape<T>& tp, std::size_t self) {
                       const T g = (*tp.grad(self))[0];
                       auto a = tp.value(is);
                       auto b = tcopy.data();
                       auto ga = tp.grad_buffer(is);
                       for (std::size_t p : pos)
                         for (std::size_t c = 0; c < d; ++c)
                           ga[p * d + c] += g * T(2) * (a[p * d + c] - b[p * d + c]) / T(d);
                     });
}

}  // namespace memdlm
