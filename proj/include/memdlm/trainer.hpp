// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training driver for both methods. A run directory holds:
//   resolved-config.cfg   every key, defaults included
//   metrics.jsonl         train and eval records (identical schema for both methods)
//   inner.jsonl           per-step inner-loop telemetry (memdlm only)
//   ckpt-<step>.bin       θ, φ₀, optimizer moments and the step counter
//   .lock                 held for the lifetime of the run

#pragma once

#include <sys/file.h>
#include <unistd.h>
#include <fcntl.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "memdlm/bilevel.hpp"
#include "memdlm/checkpoint.hpp"
#include "memdlm/config.hpp"
#include "memdlm/metrics.hpp"
#include "memdlm/probes.hpp"
#include "memdlm/taskgen.hpp"

namespace memdlm {

struct Dataset {
  std::vector<TaskPair> train;
  std::vector<TaskPair> eval;
};

/// Reads the .toks paths when given, otherwise generates the configured task
/// at every context length (counts split evenly, remainder to the first).
inline Dataset load_dataset(const RunConfig& cfg) {
  Dataset d;
  auto split_count = [&](std::size_t total, std::size_t i) {
    const std::size_t n = cfg.data.context_lens.size();
    return total / n + (i < total % n ? 1 : 0);
  };
  auto check_vocab = [&](const TaskFile& f, const std::string& path) {
    if (f.vocab_size > cfg.model.vocab_size) {
      throw ConfigError(path + " uses vocab " + std::to_string(f.vocab_size) + " but model.vocab_size is " +
                        std::to_string(cfg.model.vocab_size));
    }
  };
  if (!cfg.data.train_path.empty()) {
    auto f = read_toks(cfg.data.train_path);
    check_vocab(f, cfg.data.train_path);
    d.train = std::move(f.pairs);
  } else {
    for (std::size_t i = 0; i < cfg.data.context_lens.size(); ++i) {
      auto part = gen_tasks(cfg.task_spec(cfg.data.context_lens[i]), split_count(cfg.data.train_count, i),
                            cfg.data.seed, 0);
      d.train.insert(d.train.end(), part.begin(), part.end());
    }
  }
  if (!cfg.data.eval_path.empty()) {
    auto f = read_toks(cfg.data.eval_path);
    check_vocab(f, cfg.data.eval_path);
    d.eval = std::move(f.pairs);
  } else {
    for (std::size_t i = 0; i < cfg.data.context_lens.size(); ++i) {
      auto part = gen_tasks(cfg.task_spec(cfg.data.context_lens[i]), split_count(cfg.data.eval_count, i),
                            cfg.data.seed, 1);
      d.eval.insert(d.eval.end(), part.begin(), part.end());
    }
  }
  if (d.train.empty()) throw ConfigError("training data is empty");
  for (const auto* set : {&d.train, &d.eval}) {
    for (const auto& p : *set) {
      if (p.prompt.size() + p.response.size() > cfg.model.max_len) {
        throw LengthError("task instance of length " + std::to_string(p.prompt.size() + p.response.size()) +
                          " exceeds model.max_len " + std::to_string(cfg.model.max_len));
      }
    }
  }
  return d;
}

inline Anchor make_anchor(const TaskPair& p, double t, TokenId mask_id, Rng& rng) {
  Anchor a;
  a.x0 = concat(p);
  a.state = forward_mask(a.x0, t, p.prompt.size(), mask_id, rng);
  return a;
}

/// Eval anchors are fixed per example index so every evaluation scores the same states.
inline std::vector<Anchor> eval_anchors(const std::vector<TaskPair>& pairs, std::size_t count, double t_min,
                                        TokenId mask_id, std::uint64_t seed) {
  std::vector<Anchor> out;
  for (std::size_t i = 0; i < std::min(count, pairs.size()); ++i) {
    Rng rng(derive_seed(seed, Stream::kEval, i));
    const double t = rng.uniform(t_min, 1.0);
    out.push_back(make_anchor(pairs[i], t, mask_id, rng));
  }
  return out;
}

struct EvalLoss {
  double loss = 0.0;            // the method's own objective (memdlm: after inner adaptation)
  double loss_no_memory = 0.0;  // φ absent
};

/// Eval in chunks of `batch_size`; memdlm adapts φ on each chunk first.
inline EvalLoss evaluate_loss(const Model& model, const FastWeights* fast0, Method method,
                              const InnerLoopConfig& inner, const std::vector<Anchor>& anchors,
                              std::size_t batch_size, const NoiseSchedule& schedule, std::uint64_t seed) {
  EvalLoss out;
  if (anchors.empty()) return out;
  double with = 0.0, without = 0.0;
  for (std::size_t c = 0, chunk = 0; c < anchors.size(); c += batch_size, ++chunk) {
    std::vector<Anchor> batch(anchors.begin() + std::ptrdiff_t(c),
                              anchors.begin() + std::ptrdiff_t(std::min(anchors.size(), c + batch_size)));
    const double base = outer_loss_value(model, static_cast<const FastWeights*>(nullptr), batch, schedule);
    without += base * double(batch.size());
    if (method == Method::kMemDlm && fast0) {
      Rng rng(derive_seed(seed, Stream::kEval, std::uint64_t(1) << 32, chunk));
      auto res = inner_adapt(model, *fast0, batch, inner, rng);
      with += outer_loss_value(model, &res.fast, batch, schedule) * double(batch.size());
    } else {
      with += base * double(batch.size());
    }
  }
  out.loss = with / double(anchors.size());
  out.loss_no_memory = without / double(anchors.size());
  return out;
}

/// Exclusive advisory lock on a run directory.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) {
    const auto p = (dir / ".lock").string();
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot create " + p);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw IoError("run directory " + dir.string() + " is locked by another process");
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  int fd_ = -1;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
  return dir / ("ckpt-" + std::to_string(step) + ".bin");
}

/// Highest-step checkpoint in `dir`, if any.
inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  static const std::regex re("ckpt-([0-9]+)\\.bin");
  std::optional<std::filesystem::path> best;
  std::size_t best_step = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (!std::regex_match(name, m, re)) continue;
    const std::size_t s = std::stoull(m[1]);
    if (!best || s > best_step) {
      best = e.path();
      best_step = s;
    }
  }
  return best;
}

/// Retrieval scoring unit: one value per query for kv_niah, the whole
/// response otherwise.
inline std::size_t retrieval_item_len(const DataConfig& d) {
  return d.kind == TaskKind::kKvNiah ? d.value_len : 0;
}

/// Model ready for evaluation: θ (with any outer adapter merged) and φ₀.
struct LoadedModel {
  Model model;
  FastWeights fast0;
  std::size_t step = 0;
};

inline LoadedModel load_for_eval(const std::filesystem::path& ckpt, const RunConfig& cfg) {
  const auto ts = load_checkpoint(ckpt);
  LoadedModel out;
  Model base = model_from_tensors(ts);
  if (find_tensor(ts, "outer/blocks.0.attn.wq.A")) {
    auto ad = OuterAdapter<float>::create(base, cfg.train.outer_rank, cfg.train.outer_alpha, cfg.train.seed);
    auto names = ad.param_names();
    auto params = ad.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor* t = find_tensor(ts, names[i]);
      if (!t || t->shape() != params[i]->shape()) throw ParseError("checkpoint outer adapter is incomplete");
      *params[i] = *t;
    }
    out.model = ad.merged(base);
  } else {
    out.model = std::move(base);
  }
  FastWeightConfig fc = cfg.inner.scope;
  fc.seed = cfg.train.seed;
  out.fast0 = FastWeights::create(out.model.config(), fc);
  if (load_fast_tensors(ts, out.fast0)) out.fast0.commit_initial();
  if (const Tensor* st = find_tensor(ts, "meta/state")) out.step = std::size_t((*st)[0]);
  return out;
}

class Trainer {
 public:
  Trainer(RunConfig cfg, Dataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.finalize();
    cfg_.validate();
    schedule_.t_min = cfg_.diffusion.t_min;
    base_ = Model::init(cfg_.model);
    fast0_ = FastWeights::create(cfg_.model, cfg_.inner.scope);
    if (cfg_.train.outer_scope == OuterScope::kLora) {
      adapter_ = OuterAdapter<float>::create(base_, cfg_.train.outer_rank, cfg_.train.outer_alpha, cfg_.train.seed);
    }
    anchors_ = eval_anchors(data_.eval, cfg_.data.eval_count, cfg_.diffusion.t_min, mask_id(), cfg_.train.seed);
  }

  const RunConfig& config() const { return cfg_; }
  const Model& base_model() const { return base_; }
  Model effective_model() const { return adapter_ ? adapter_->merged(base_) : base_; }
  const FastWeights& fast0() const { return fast0_; }
  std::size_t step() const { return step_; }
  const std::vector<MetricRecord>& records() const { return records_; }

  /// Loads the newest checkpoint from `path` (a file or a run directory).
  /// Returns false when there is nothing to resume from.
  bool resume(const std::filesystem::path& path) {
    std::optional<std::filesystem::path> ckpt =
        std::filesystem::is_directory(path) ? latest_checkpoint(path) : std::optional(path);
    if (!ckpt || !std::filesystem::exists(*ckpt)) return false;
    const auto ts = load_checkpoint(*ckpt);
    base_ = model_from_tensors(ts);
    if (base_.config().d_model != cfg_.model.d_model || base_.config().n_layers != cfg_.model.n_layers) {
      throw ConfigError("checkpoint model shape differs from the configuration");
    }
    if (load_fast_tensors(ts, fast0_)) fast0_.commit_initial();
    auto names = trainable_names();
    auto params = trainable();
    if (adapter_) {
      auto an = adapter_->param_names();
      auto ap = adapter_->params();
      for (std::size_t i = 0; i < ap.size(); ++i) {
        const Tensor* t = find_tensor(ts, an[i]);
        if (!t) throw ParseError("checkpoint lacks " + an[i]);
        *ap[i] = *t;
      }
    }
    const Tensor* st = find_tensor(ts, "meta/state");
    if (!st || st->size() != 2) throw ParseError("checkpoint lacks meta/state");
    step_ = std::size_t((*st)[0]);
    opt_.init(params);
    opt_.set_steps_taken(std::size_t((*st)[1]));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor* m = find_tensor(ts, "optim/m/" + names[i]);
      const Tensor* v = find_tensor(ts, "optim/v/" + names[i]);
      if (!m || !v) throw ParseError("checkpoint lacks optimizer state for " + names[i]);
      opt_.first_moments()[i] = *m;
      opt_.second_moments()[i] = *v;
    }
    return true;
  }

  /// Trains until `stop_at` completed steps (default: train.steps). With an
  /// output directory, records and checkpoints are written there.
  void run(std::optional<std::size_t> stop_at = std::nullopt) {
    const std::size_t end = std::min(stop_at.value_or(cfg_.train.steps), cfg_.train.steps);
    std::optional<RunLock> lock;
    const bool persist = !cfg_.out.dir.empty();
    const std::filesystem::path dir = cfg_.out.dir;
    if (persist) {
      std::filesystem::create_directories(dir);
      lock.emplace(dir);
      write_text(dir / "resolved-config.cfg", config_to_text(cfg_));
      truncate_jsonl(dir / "metrics.jsonl", step_);
      truncate_jsonl(dir / "inner.jsonl", step_);
      metrics_ = JsonlWriter(dir / "metrics.jsonl");
      if (cfg_.train.method == Method::kMemDlm) inner_log_ = JsonlWriter(dir / "inner.jsonl");
    }
    auto params = trainable();
    if (opt_.first_moments().size() != params.size()) opt_.init(params);
    while (step_ < end) {
      train_step();
      ++step_;
      const bool last = step_ == cfg_.train.steps;
      if ((cfg_.train.eval_every && step_ % cfg_.train.eval_every == 0) || last) eval_now();
      if (persist && ((cfg_.train.ckpt_every && step_ % cfg_.train.ckpt_every == 0) || last || step_ == end)) {
        save(checkpoint_path(dir, step_));
      }
    }
  }

  void save(const std::filesystem::path& path) const {
    std::vector<NamedTensor> ts = model_tensors(base_, &fast0_);
    if (adapter_) {
      auto& ad = const_cast<OuterAdapter<float>&>(*adapter_);
      auto names = ad.param_names();
      auto params = ad.params();
      for (std::size_t i = 0; i < params.size(); ++i) ts.push_back({names[i], *params[i]});
    }
    auto names = const_cast<Trainer*>(this)->trainable_names();
    for (std::size_t i = 0; i < names.size() && i < opt_.first_moments().size(); ++i) {
      ts.push_back({"optim/m/" + names[i], opt_.first_moments()[i]});
      ts.push_back({"optim/v/" + names[i], opt_.second_moments()[i]});
    }
    ts.push_back({"meta/state", Tensor({2}, {float(step_), float(opt_.steps_taken())})});
    save_checkpoint(path, ts);
  }

 private:
  TokenId mask_id() const { return TokenId(cfg_.model.vocab_size); }

  std::vector<Tensor*> trainable() {
    if (adapter_) return adapter_->params();
    std::vector<Tensor*> out;
    for (auto& p : base_.parameters()) out.push_back(p.tensor);
    return out;
  }
  std::vector<std::string> trainable_names() {
    if (adapter_) return adapter_->param_names();
    std::vector<std::string> out;
    for (auto& p : base_.parameters()) out.push_back(p.name);
    return out;
  }

  std::vector<Anchor> draw_batch() const {
    Rng data_rng(derive_seed(cfg_.train.seed, Stream::kData, step_));
    Rng mask_rng(derive_seed(cfg_.train.seed, Stream::kMask, step_));
    std::vector<Anchor> batch;
    for (std::size_t b = 0; b < cfg_.train.batch_size; ++b) {
      const auto& p = data_.train[data_rng.uniform_int(data_.train.size())];
      const double t = mask_rng.uniform(cfg_.diffusion.t_min, 1.0);
      batch.push_back(make_anchor(p, t, mask_id(), mask_rng));
    }
    return batch;
  }

  void fail(const std::string& why) {
    if (!cfg_.out.dir.empty()) {
      Json j;
      j["phase"] = "error";
      j["step"] = step_;
      j["seed"] = cfg_.train.seed;
      j["message"] = why;
      write_text(std::filesystem::path(cfg_.out.dir) / "error.json", j.dump(2) + "\n");
    }
    throw NumericFailure("step " + std::to_string(step_) + ": " + why);
  }

  void train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Anchor> batch = draw_batch();
    const Model merged = adapter_ ? adapter_->merged(base_) : Model();
    const Model& model = adapter_ ? merged : base_;
    LossAndGrads<float> lg;
    std::optional<InnerResult<float>> inner;
    try {
      if (cfg_.train.method == Method::kMemDlm) {
        Rng rng(derive_seed(cfg_.train.seed, Stream::kInner, step_));
        inner = inner_adapt(model, fast0_, batch, cfg_.inner, rng);
        lg = outer_gradients(model, &inner->fast, batch, schedule_);
      } else {
        lg = outer_gradients(model, static_cast<const FastWeights*>(nullptr), batch, schedule_);
      }
    } catch (const NumericError& e) {
      fail(e.what());
    }
    if (!std::isfinite(lg.loss)) fail("non-finite loss " + std::to_string(lg.loss));
    for (const auto& st : inner ? inner->stages : std::vector<InnerStageRecord>{}) {
      if (!std::isfinite(st.loss)) fail("non-finite inner loss");
    }
    std::vector<Tensor> grads = adapter_ ? adapter_->project(lg.grads) : std::move(lg.grads);
    const double gnorm = clip_global_norm(grads, cfg_.train.grad_clip);
    if (!std::isfinite(gnorm)) fail("non-finite gradient norm");
    const double lr = learning_rate(step_, cfg_.train.steps, cfg_.train.lr, cfg_.train.warmup, cfg_.train.schedule);
    opt_.step(trainable(), grads, lr);

    MetricRecord rec;
    rec.phase = "train";
    rec.step = step_;
    rec.seed = cfg_.train.seed;
    rec.add("loss", lg.loss).add("lr", lr).add("grad_norm", gnorm);
    if (cfg_.out.wall_clock) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    emit(rec);
    if (inner && inner_log_.is_open()) {
      Json j;
      j["step"] = step_;
      Json stages = Json::array();
      for (const auto& s : inner->stages) {
        stages.push_back({{"anchor", s.anchor_stage}, {"loss", s.loss}, {"grad_norm", s.grad_norm},
                          {"mask_ratio", s.mask_ratio}});
      }
      j["stages"] = stages;
      inner_log_.write(j);
    }
  }

  void eval_now() {
    if (anchors_.empty()) return;
    const auto t0 = std::chrono::steady_clock::now();
    const Model model = effective_model();
    EvalLoss e;
    try {
      e = evaluate_loss(model, &fast0_, cfg_.train.method, cfg_.inner, anchors_, cfg_.train.batch_size, schedule_,
                        cfg_.train.seed);
    } catch (const NumericError& err) {
      fail(err.what());
    }
    MetricRecord rec;
    rec.phase = "eval";
    rec.step = step_ - 1;
    rec.seed = cfg_.train.seed;
    rec.add("loss", e.loss).add("loss_no_memory", e.loss_no_memory);
    if (cfg_.out.wall_clock) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    emit(rec);
  }

  void emit(const MetricRecord& rec) {
    records_.push_back(rec);
    if (metrics_.is_open()) metrics_.write(rec.to_json());
  }

  static void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
  }

  RunConfig cfg_;
  Dataset data_;
  NoiseSchedule schedule_;
  Model base_;
  FastWeights fast0_;
  std::optional<OuterAdapter<float>> adapter_;
  AdamW<float> opt_;
  std::vector<Anchor> anchors_;
  std::size_t step_ = 0;
  std::vector<MetricRecord> records_;
  JsonlWriter metrics_;
  JsonlWriter inner_log_;
};

}  // namespace memdlm
