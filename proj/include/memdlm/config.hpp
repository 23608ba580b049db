// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat run configuration:
//
//   # comment
//   model.d_model = 64
//   inner.clip = none
//
// Keys are namespaced and fixed; an unknown key is an error.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "memdlm/bilevel.hpp"
#include "memdlm/infer_adapt.hpp"
#include "memdlm/model.hpp"
#include "memdlm/taskgen.hpp"

namespace memdlm {

inline constexpr const char* kConfigHeader = "# memdlm-config v1";

enum class Method { kStandardMdlm, kMemDlm };
enum class OuterScope { kFull, kLora };

struct DiffusionConfig {
  double t_min = 0.02;
  std::size_t sampler_steps = 10;
};

struct TrainConfig {
  Method method = Method::kMemDlm;
  double lr = 2e-4;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double warmup = 0.1;
  LrSchedule schedule = LrSchedule::kCosine;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // 0 disables
  std::size_t eval_every = 50;
  std::size_t ckpt_every = 0;  // 0: final checkpoint only
  OuterScope outer_scope = OuterScope::kFull;
  std::size_t outer_rank = 4;
  double outer_alpha = 8.0;
};

/// Task data: either .toks paths or an on-the-fly generator spec.
struct DataConfig {
  TaskKind kind = TaskKind::kKvNiah;
  std::string train_path;
  std::string eval_path;
  std::vector<std::size_t> context_lens{64};
  std::size_t n_pairs = 4;
  std::size_t n_queries = 1;
  std::size_t value_len = 1;
  std::size_t chain_len = 2;
  std::size_t span_len = 4;
  std::size_t train_count = 2000;
  std::size_t eval_count = 64;
  std::uint64_t seed = 1;
};

struct OutConfig {
  std::string dir = "runs/default";
  bool wall_clock = false;
};

struct RunConfig {
  ModelConfig model;
  DiffusionConfig diffusion;
  TrainConfig train;
  InnerLoopConfig inner;
  InferenceAdaptConfig infer;
  DataConfig data;
  OutConfig out;

  /// Copies shared settings into the module configs.
  void finalize() {
    model.seed = train.seed;
    inner.scope.seed = train.seed;
    inner.t_min = diffusion.t_min;
  }

  void validate() const {
    if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (train.warmup < 0.0 || train.warmup > 1.0) throw ConfigError("train.warmup must lie in [0, 1]");
    if (train.grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
    if (train.outer_scope == OuterScope::kLora && train.outer_rank == 0) throw ConfigError("train.outer_rank must be positive");
    if (!(diffusion.t_min > 0.0 && diffusion.t_min < 1.0)) throw ConfigError("diffusion.t_min must lie in (0, 1)");
    if (diffusion.sampler_steps == 0) throw ConfigError("diffusion.sampler_steps must be positive");
    if (model.d_model % model.n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
    if (data.context_lens.empty()) throw ConfigError("data.context_lens must not be empty");
    inner.validate();
  }

  TaskSpec task_spec(std::size_t context_len) const {
    TaskSpec s;
    s.kind = data.kind;
    s.context_len = context_len;
    s.n_pairs = data.n_pairs;
    s.n_queries = data.n_queries;
    s.value_len = data.value_len;
    s.chain_len = data.chain_len;
    s.span_len = data.span_len;
    s.vocab_size = model.vocab_size;
    return s;
  }
};

namespace detail {

/// One config key bound to a field.
struct ConfigField {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename E>
using EnumNames = std::vector<std::pair<const char*, E>>;

class FieldTable {
 public:
  void size(const std::string& key, std::size_t& f) {
    add(key, [&f, key](const std::string& v) { f = parse_size(key, v); }, [&f] { return std::to_string(f); });
  }
  void u64(const std::string& key, std::uint64_t& f) {
    add(key, [&f, key](const std::string& v) { f = parse_size(key, v); }, [&f] { return std::to_string(f); });
  }
  void real(const std::string& key, double& f) {
    add(key, [&f, key](const std::string& v) { f = parse_double(key, v); }, [&f] { return fmt_double(f); });
  }
  void boolean(const std::string& key, bool& f) {
    add(
        key,
        [&f, key](const std::string& v) {
          if (v == "true" || v == "1") f = true;
          else if (v == "false" || v == "0") f = false;
          else throw ConfigError(key + ": expected true or false, got '" + v + "'");
        },
        [&f] { return std::string(f ? "true" : "false"); });
  }
  void text(const std::string& key, std::string& f) {
    add(key, [&f](const std::string& v) { f = v; }, [&f] { return f; });
  }
  void optional_real(const std::string& key, std::optional<double>& f) {
    add(
        key, [&f, key](const std::string& v) { f = v == "none" ? std::nullopt : std::optional(parse_double(key, v)); },
        [&f] { return f ? fmt_double(*f) : std::string("none"); });
  }
  void size_list(const std::string& key, std::vector<std::size_t>& f) {
    add(
        key,
        [&f, key](const std::string& v) {
          f.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) f.push_back(parse_size(key, trim(item)));
        },
        [&f] {
          std::string s;
          for (std::size_t i = 0; i < f.size(); ++i) s += (i ? "," : "") + std::to_string(f[i]);
          return s;
        });
  }
  template <typename E>
  void choice(const std::string& key, E& f, EnumNames<E> names) {
    add(
        key,
        [&f, key, names](const std::string& v) {
          std::string valid;
          for (const auto& [n, e] : names) {
            if (v == n) {
              f = e;
              return;
            }
            valid += std::string(valid.empty() ? "" : ", ") + n;
          }
          throw ConfigError(key + ": unknown value '" + v + "' (expected one of " + valid + ")");
        },
        [&f, names] {
          for (const auto& [n, e] : names) {
            if (e == f) return std::string(n);
          }
          return std::string("?");
        });
  }

  const std::vector<ConfigField>& fields() const { return fields_; }
  const ConfigField* find(const std::string& key) const {
    for (const auto& f : fields_) {
      if (f.key == key) return &f;
    }
    return nullptr;
  }

  static std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
      if (!v.empty() && v[0] == '-') throw ConfigError("");
      x = std::stoull(v, &used);
    } catch (...) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return std::size_t(x);
  }
  static double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
      x = std::stod(v, &used);
    } catch (...) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return x;
  }

 private:
  void add(const std::string& key, std::function<void(const std::string&)> set, std::function<std::string()> get) {
    fields_.push_back({key, std::move(set), std::move(get)});
  }
  std::vector<ConfigField> fields_;
};

inline const EnumNames<Supervision> kSupervisionNames = {{"cross_entropy", Supervision::kCrossEntropy},
                                                         {"kl_distill", Supervision::kKlDistill},
                                                         {"reverse_kl_distill", Supervision::kReverseKlDistill},
                                                         {"hidden_cosine", Supervision::kHiddenCosine},
                                                         {"hidden_mse", Supervision::kHiddenMse}};

inline FieldTable bind_fields(RunConfig& c) {
  FieldTable t;
  t.size("model.vocab_size", c.model.vocab_size);
  t.size("model.d_model", c.model.d_model);
  t.size("model.n_heads", c.model.n_heads);
  t.size("model.n_layers", c.model.n_layers);
  t.size("model.max_len", c.model.max_len);
  t.size("model.ffn_mult", c.model.ffn_mult);
  t.real("model.init_std", c.model.init_std);

  t.real("diffusion.t_min", c.diffusion.t_min);
  t.size("diffusion.sampler_steps", c.diffusion.sampler_steps);

  t.choice<Method>("train.method", c.train.method,
                   {{"standard_mdlm", Method::kStandardMdlm}, {"memdlm", Method::kMemDlm}});
  t.real("train.lr", c.train.lr);
  t.size("train.steps", c.train.steps);
  t.size("train.batch_size", c.train.batch_size);
  t.u64("train.seed", c.train.seed);
  t.real("train.warmup", c.train.warmup);
  t.choice<LrSchedule>("train.schedule", c.train.schedule,
                       {{"cosine", LrSchedule::kCosine}, {"constant", LrSchedule::kConstant}});
  t.real("train.weight_decay", c.train.weight_decay);
  t.real("train.grad_clip", c.train.grad_clip);
  t.size("train.eval_every", c.train.eval_every);
  t.size("train.ckpt_every", c.train.ckpt_every);
  t.choice<OuterScope>("train.outer_scope", c.train.outer_scope, {{"full", OuterScope::kFull}, {"lora", OuterScope::kLora}});
  t.size("train.outer_rank", c.train.outer_rank);
  t.real("train.outer_alpha", c.train.outer_alpha);

  t.real("inner.eta", c.inner.eta);
  t.size("inner.k", c.inner.k);
  t.real("inner.s_pre", c.inner.s_pre);
  t.choice<Supervision>("inner.supervision", c.inner.supervision, kSupervisionNames);
  t.choice<Stage1Target>("inner.stage1_target", c.inner.stage1_target,
                         {{"broad_clean", Stage1Target::kBroadClean}, {"anchor_token_only", Stage1Target::kAnchorTokenOnly}});
  t.choice<GradNorm>("inner.normalization", c.inner.normalization,
                     {{"local", GradNorm::kLocal}, {"global", GradNorm::kGlobal}, {"off", GradNorm::kOff}});
  t.optional_real("inner.clip", c.inner.clip);
  t.real("inner.scope_fraction", c.inner.scope.fraction);
  t.boolean("inner.ffn_only", c.inner.scope.ffn_only);
  t.boolean("inner.full_param", c.inner.scope.full_param);
  t.size("inner.rank", c.inner.scope.rank);
  t.real("inner.alpha", c.inner.scope.alpha);
  t.choice<FastInit>("inner.init", c.inner.scope.init,
                     {{"zero_product", FastInit::kZeroProduct}, {"zero_both", FastInit::kZeroBoth}});
  t.choice<Trajectory>("inner.trajectory", c.inner.trajectory,
                       {{"anchor_consistent", Trajectory::kAnchorConsistent}, {"inconsistent", Trajectory::kInconsistent}});
  t.choice<InnerStages>("inner.stages", c.inner.stages,
                        {{"both", InnerStages::kBoth}, {"pre_anchor_only", InnerStages::kPreAnchorOnly},
                         {"anchor_only", InnerStages::kAnchorOnly}});
  t.real("inner.teacher_reveal", c.inner.teacher_reveal);

  t.boolean("infer.enabled", c.infer.enabled);
  t.real("infer.anchor_ratio", c.infer.anchor_ratio);
  t.real("infer.eta", c.infer.eta);
  t.size("infer.epochs", c.infer.epochs);
  t.real("infer.s_pre", c.infer.s_pre);
  t.choice<Supervision>("infer.supervision", c.infer.supervision, kSupervisionNames);

  t.choice<TaskKind>("data.kind", c.data.kind,
                     {{"kv_niah", TaskKind::kKvNiah}, {"variable_tracking", TaskKind::kVariableTracking},
                      {"copy", TaskKind::kCopy}});
  t.text("data.train_path", c.data.train_path);
  t.text("data.eval_path", c.data.eval_path);
  t.size_list("data.context_lens", c.data.context_lens);
  t.size("data.n_pairs", c.data.n_pairs);
  t.size("data.n_queries", c.data.n_queries);
  t.size("data.value_len", c.data.value_len);
  t.size("data.chain_len", c.data.chain_len);
  t.size("data.span_len", c.data.span_len);
  t.size("data.train_count", c.data.train_count);
  t.size("data.eval_count", c.data.eval_count);
  t.u64("data.seed", c.data.seed);

  t.text("out.dir", c.out.dir);
  t.boolean("out.wall_clock", c.out.wall_clock);
  return t;
}

}  // namespace detail

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Splits flat `key = value` text; `#` starts a comment.
inline std::vector<KeyValue> parse_key_values(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected 'key = value'");
    KeyValue kv{detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), n};
    if (kv.key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    out.push_back(std::move(kv));
  }
  return out;
}

/// Sets one key; unknown keys are rejected by name.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto table = detail::bind_fields(cfg);
  const auto* f = table.find(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  f->set(value);
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  auto table = detail::bind_fields(cfg);
  for (const auto& kv : parse_key_values(text)) {
    const auto* f = table.find(kv.key);
    if (!f) throw ConfigError("line " + std::to_string(kv.line) + ": unknown config key '" + kv.key + "'");
    try {
      f->set(kv.value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(kv.line) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Every key with its resolved value, in a fixed order.
inline std::string config_to_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  auto table = detail::bind_fields(copy);
  std::string out = std::string(kConfigHeader) + "\n";
  std::string ns;
  for (const auto& f : table.fields()) {
    const std::string this_ns = f.key.substr(0, f.key.find('.'));
    if (this_ns != ns && !ns.empty()) out += "\n";
    ns = this_ns;
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

inline std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> out;
  const auto table = detail::bind_fields(c);
  for (const auto& f : table.fields()) out.push_back(f.key);
  return out;
}

}  // namespace memdlm
