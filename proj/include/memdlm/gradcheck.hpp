// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of every differentiable op and of the
// training losses, run in double precision on micro-models.

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "memdlm/autodiff.hpp"
#include "memdlm/bilevel.hpp"
#include "memdlm/diffusion.hpp"
#include "memdlm/model.hpp"
#include "memdlm/rng.hpp"

namespace memdlm {

struct GradcheckTolerance {
  double rel = 1e-3;
  double abs_floor = 1e-6;
  double eps = 1e-6;
  std::size_t max_coords_per_tensor = 24;
};

struct GradcheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // over coords whose gradient magnitude exceeds the floor
  bool pass = true;
};

/// A scalar function of `params` with its analytic gradient.
struct GradProblem {
  std::string name;
  std::vector<BasicTensor<double>*> params;
  std::function<std::vector<BasicTensor<double>>()> analytic;
  std::function<double()> value;
};

inline GradcheckResult run_gradcheck(const GradProblem& prob, const GradcheckTolerance& tol, std::uint64_t seed) {
  GradcheckResult r;
  r.name = prob.name;
  const auto grads = prob.analytic();
  if (grads.size() != prob.params.size()) throw Error("gradcheck " + prob.name + ": gradient count mismatch");
  Rng rng(seed);
  for (std::size_t p = 0; p < prob.params.size(); ++p) {
    auto w = prob.params[p]->data();
    std::vector<std::size_t> coords;
    if (w.size() <= tol.max_coords_per_tensor) {
      for (std::size_t i = 0; i < w.size(); ++i) coords.push_back(i);
    } else {
      coords = rng.sample_without_replacement(w.size(), tol.max_coords_per_tensor);
    }
    for (std::size_t i : coords) {
      const double orig = w[i];
      w[i] = orig + tol.eps;
      const double up = prob.value();
      w[i] = orig - tol.eps;
      const double down = prob.value();
      w[i] = orig;
      const double num = (up - down) / (2.0 * tol.eps);
      const double ana = grads[p][i];
      const double err = std::abs(ana - num);
      const double scale = std::max(std::abs(ana), std::abs(num));
      r.max_abs_err = std::max(r.max_abs_err, err);
      if (scale > tol.abs_floor) r.max_rel_err = std::max(r.max_rel_err, err / scale);
      if (err > std::max(tol.abs_floor, tol.rel * scale)) r.pass = false;
      ++r.checked;
    }
  }
  return r;
}

namespace detail {

using D = double;

inline BasicTensor<D> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  BasicTensor<D> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

/// Wraps an op by contracting its output with a fixed random tensor so every
/// output coordinate influences the scalar.
struct OpCase {
  std::string name;
  std::vector<BasicTensor<D>> inputs;
  std::function<DiffTensor<D>(const std::vector<DiffTensor<D>>&)> op;
};

inline GradProblem op_problem(std::shared_ptr<OpCase> c, Rng& rng) {
  // Probe output shape once.
  Shape out_shape;
  {
    Tape<D> tape(false);
    std::vector<DiffTensor<D>> xs;
    for (auto& t : c->inputs) xs.push_back(tape.leaf(t, false));
    out_shape = c->op(xs).shape();
  }
  auto contract = std::make_shared<BasicTensor<D>>(random_tensor(out_shape, rng));
  auto eval = [c, contract](bool grad) {
    Tape<D> tape(grad);
    std::vector<DiffTensor<D>> xs;
    for (auto& t : c->inputs) xs.push_back(tape.leaf(t, true));
    DiffTensor<D> y = c->op(xs);
    DiffTensor<D> loss = contract->size() == 1 ? scale(y, (*contract)[0])
                                                : sum(mul(y, tape.constant(*contract)));
    std::vector<BasicTensor<D>> g;
    if (grad) {
      tape.backward(loss);
      for (auto& x : xs) {
        BasicTensor<D> gi(x.shape());
        if (auto gv = x.grad()) std::copy(gv->begin(), gv->end(), gi.data().begin());
        g.push_back(std::move(gi));
      }
    }
    return std::pair<double, std::vector<BasicTensor<D>>>(loss.item(), std::move(g));
  };
  GradProblem p;
  p.name = "op/" + c->name;
  for (auto& t : c->inputs) p.params.push_back(&t);
  p.analytic = [eval] { return eval(true).second; };
  p.value = [eval] { return eval(false).first; };
  return p;
}

}  // namespace detail

/// Every differentiable op on small random inputs.
inline std::vector<GradcheckResult> gradcheck_ops(const GradcheckTolerance& tol, std::uint64_t seed) {
  using detail::D;
  using detail::OpCase;
  using detail::random_tensor;
  Rng rng(seed);
  std::vector<std::shared_ptr<OpCase>> cases;
  auto mk = [&](std::string name, std::vector<BasicTensor<D>> in,
                std::function<DiffTensor<D>(const std::vector<DiffTensor<D>>&)> op) {
    cases.push_back(std::make_shared<OpCase>(OpCase{std::move(name), std::move(in), std::move(op)}));
  };
  const std::vector<TokenId> ids = {2, 0, 3, 2, 1};
  const std::vector<TokenId> targets = {1, 3, 0, 2, 2};
  const std::vector<std::size_t> pos = {0, 2, 3};

  mk("matmul", {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)}, [](auto& x) { return matmul(x[0], x[1]); });
  mk("add", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, [](auto& x) { return add(x[0], x[1]); });
  mk("add_rowwise", {random_tensor({3, 4}, rng), random_tensor({4}, rng)},
     [](auto& x) { return add_rowwise(x[0], x[1]); });
  mk("scale", {random_tensor({3, 4}, rng)}, [](auto& x) { return scale(x[0], D(-1.7)); });
  mk("mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, [](auto& x) { return mul(x[0], x[1]); });
  mk("sum", {random_tensor({3, 4}, rng)}, [](auto& x) { return sum(x[0]); });
  mk("add_scalars", {random_tensor({}, rng), random_tensor({}, rng)},
     [](auto& x) { return add_scalars(std::vector<DiffTensor<D>>{x[0], x[1]}); });
  mk("layer_norm", {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
     [](auto& x) { return layer_norm(x[0], x[1], x[2]); });
  mk("gelu", {random_tensor({3, 4}, rng, 2.0)}, [](auto& x) { return gelu(x[0]); });
  mk("embedding_lookup", {random_tensor({4, 3}, rng)}, [ids](auto& x) { return embedding_lookup(x[0], ids); });
  mk("softmax_rows", {random_tensor({3, 5}, rng)}, [](auto& x) { return softmax_rows(x[0]); });
  mk("self_attention", {random_tensor({5, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)},
     [](auto& x) { return self_attention(x[0], x[1], x[2], 2); });
  mk("cross_entropy_masked", {random_tensor({5, 4}, rng)},
     [targets, pos](auto& x) { return cross_entropy_masked(x[0], targets, pos); });
  const auto teacher = random_tensor({5, 4}, rng);
  mk("kl_forward", {random_tensor({5, 4}, rng)},
     [teacher, pos](auto& x) { return kl_masked(x[0], teacher, pos, KlDirection::kForward); });
  mk("kl_reverse", {random_tensor({5, 4}, rng)},
     [teacher, pos](auto& x) { return kl_masked(x[0], teacher, pos, KlDirection::kReverse); });
  mk("cosine_distance_masked", {random_tensor({5, 4}, rng)},
     [teacher, pos](auto& x) { return cosine_distance_masked(x[0], teacher, pos); });
  mk("mse_masked", {random_tensor({5, 4}, rng)}, [teacher, pos](auto& x) { return mse_masked(x[0], teacher, pos); });

  std::vector<GradcheckResult> out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    out.push_back(run_gradcheck(detail::op_problem(cases[i], rng), tol, derive_seed(seed, i)));
  }
  return out;
}

/// Micro-model used by the loss checks.
inline ModelConfig micro_model_config() {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_len = 12;
  c.ffn_mult = 2;
  c.init_std = 0.3;
  c.seed = 11;
  return c;
}

/// Inner-stage losses w.r.t. φ and the outer loss w.r.t. θ with φ frozen.
inline std::vector<GradcheckResult> gradcheck_losses(const GradcheckTolerance& tol, std::uint64_t seed) {
  using detail::D;
  const ModelConfig mc = micro_model_config();
  auto model = std::make_shared<BasicModel<D>>(BasicModel<D>::init(mc));
  FastWeightConfig fc;
  fc.fraction = 0.5;
  fc.ffn_only = false;
  fc.rank = 2;
  fc.seed = seed;
  auto fast = std::make_shared<BasicFastWeights<D>>(BasicFastWeights<D>::create(mc, fc));
  Rng rng(seed);
  for (auto* p : fast->params()) {
    for (auto& v : p->data()) v = rng.normal() * 0.3;
  }
  const TokenId mask = TokenId(mc.vocab_size);
  Sequence x0 = {5, 1, 6, 2, 7, 0, 3, 4, 1, 2};
  const std::size_t prompt_len = 3;
  auto x_t = std::make_shared<NoisyState>(forward_mask(x0, 0.5, prompt_len, mask, rng));
  auto x_pre = std::make_shared<NoisyState>(further_mask(*x_t, 0.8, mask, rng));

  std::vector<GradProblem> problems;
  auto fast_problem = [&](std::string name, std::function<DiffTensor<D>(ModelGraph<D>&)> loss_fn) {
    GradProblem p;
    p.name = std::move(name);
    p.params = fast->params();
    p.analytic = [model, fast, loss_fn] {
      ModelGraph<D> g(*model, fast.get(), {.base = false, .fast = true});
      auto l = loss_fn(g);
      g.backward(l);
      return g.fast_grads();
    };
    p.value = [model, fast, loss_fn] {
      ModelGraph<D> g(*model, fast.get(), {});
      return double(loss_fn(g).item());
    };
    problems.push_back(std::move(p));
  };
  const auto seq0 = std::make_shared<Sequence>(x0);
  fast_problem("stage1/broad_clean", [x_pre, x_t, seq0](ModelGraph<D>& g) {
    return stage1_loss(g, *x_pre, *x_t, *seq0, Stage1Target::kBroadClean);
  });
  fast_problem("stage1/anchor_token_only", [x_pre, x_t, seq0](ModelGraph<D>& g) {
    return stage1_loss(g, *x_pre, *x_t, *seq0, Stage1Target::kAnchorTokenOnly);
  });
  // The teacher is evaluated once and held constant, as in training.
  auto teacher = std::make_shared<Teacher<D>>(make_teacher(*model, fast.get(), *x_t, 0.25));
  const std::pair<const char*, Supervision> modes[] = {{"cross_entropy", Supervision::kCrossEntropy},
                                                       {"kl_distill", Supervision::kKlDistill},
                                                       {"reverse_kl_distill", Supervision::kReverseKlDistill},
                                                       {"hidden_cosine", Supervision::kHiddenCosine},
                                                       {"hidden_mse", Supervision::kHiddenMse}};
  for (const auto& [name, mode] : modes) {
    fast_problem(std::string("stage2/") + name, [x_t, seq0, teacher, mode = mode](ModelGraph<D>& g) {
      return stage2_loss(g, *x_t, *seq0, mode, teacher.get());
    });
  }

  {
    GradProblem p;
    p.name = "outer/theta_with_frozen_phi";
    for (auto& np : model->parameters()) p.params.push_back(np.tensor);
    NoiseSchedule sched;
    p.analytic = [model, fast, x_t, seq0, sched] {
      ModelGraph<D> g(*model, fast.get(), {.base = true, .fast = false});
      auto l = mdlm_loss(g.run(x_t->tokens).logits, *seq0, *x_t, sched);
      g.backward(l);
      return g.base_grads();
    };
    p.value = [model, fast, x_t, seq0, sched] {
      ModelGraph<D> g(*model, fast.get(), {});
      return double(mdlm_loss(g.run(x_t->tokens).logits, *seq0, *x_t, sched).item());
    };
    problems.push_back(std::move(p));
  }

  std::vector<GradcheckResult> out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    out.push_back(run_gradcheck(problems[i], tol, derive_seed(seed, 100 + i)));
  }
  return out;
}

inline std::vector<GradcheckResult> gradcheck_all(const GradcheckTolerance& tol = {}, std::uint64_t seed = 7) {
  auto a = gradcheck_ops(tol, seed);
  auto b = gradcheck_losses(tol, seed);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace memdlm
