// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// memdlm: command-line front end.
//
//   memdlm gen-data --spec data.cfg --out data/
//   memdlm train --config run.cfg [--resume] [--train.seed=3 ...]
//   memdlm eval-exposure --ckpt runs/x [--samples 4]
//   memdlm eval-retrieval --ckpt runs/x [--infer.enabled=true]
//   memdlm generate --ckpt runs/x --prompt prompt.txt --response-len 10
//   memdlm gradcheck
//
// Trailing --<namespace>.<key>=<value> flags override the configuration.
// Exit codes: 0 success, 2 usage or configuration, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "memdlm/gradcheck.hpp"
#include "memdlm/trainer.hpp"

namespace fs = std::filesystem;
using namespace memdlm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Applies "--a.b=v" or "--a.b v" pairs left over after CLI11 parsing.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
      throw UsageError("unrecognized argument: " + arg);
    }
    arg = arg.substr(2);
    std::string key, value;
    if (const auto eq = arg.find('='); eq != std::string::npos) {
      key = arg.substr(0, eq);
      value = arg.substr(eq + 1);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("missing value for --" + arg);
      key = arg;
      value = extras[++i];
    }
    apply_setting(cfg, key, value);
  }
}

RunConfig build_config(const std::string& path, const std::vector<std::string>& extras) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  apply_overrides(cfg, extras);
  cfg.finalize();
  cfg.validate();
  return cfg;
}

/// Resolves --ckpt (file or run directory) and the run config, which
/// defaults to resolved-config.cfg beside the checkpoint.
std::pair<fs::path, RunConfig> eval_inputs(const std::string& ckpt_arg, const std::string& config_arg,
                                           const std::vector<std::string>& extras) {
  fs::path ckpt = ckpt_arg;
  if (fs::is_directory(ckpt)) {
    auto latest = latest_checkpoint(ckpt);
    if (!latest) throw UsageError("no checkpoint in " + ckpt.string());
    ckpt = *latest;
  }
  if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt.string());
  std::string cfg_path = config_arg;
  if (cfg_path.empty()) {
    const fs::path beside = ckpt.parent_path() / "resolved-config.cfg";
    if (fs::exists(beside)) cfg_path = beside.string();
  }
  return {ckpt, build_config(cfg_path, extras)};
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
  const RunConfig cfg = build_config(spec_path, {});
  const fs::path out = out_dir;
  fs::create_directories(out);
  Json manifest;
  manifest["version"] = "memdlm-manifest v1";
  manifest["kind"] = task_kind_name(cfg.data.kind);
  manifest["seed"] = cfg.data.seed;
  manifest["vocab_size"] = cfg.model.vocab_size;
  Json files = Json::array();
  const std::pair<const char*, std::size_t> splits[] = {{"train", cfg.data.train_count}, {"eval", cfg.data.eval_count}};
  for (std::size_t split = 0; split < 2; ++split) {
    const auto [name, total] = splits[split];
    std::vector<TaskPair> all;
    Json per_len = Json::object();
    const std::size_t n = cfg.data.context_lens.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = cfg.data.context_lens[i];
      const std::size_t count = total / n + (i < total % n ? 1 : 0);
      const TaskSpec spec = cfg.task_spec(len);
      auto part = gen_tasks(spec, count, cfg.data.seed, split);
      for (const auto& p : part) {
        if (auto why = check_pair(spec, p); !why.empty()) throw Error("generated pair failed validity: " + why);
      }
      per_len[std::to_string(len)] = count;
      all.insert(all.end(), part.begin(), part.end());
    }
    const std::string file = std::string(name) + ".toks";
    write_toks(out / file, cfg.model.vocab_size, all);
    files.push_back({{"path", file}, {"split", name}, {"count", all.size()}, {"per_context_len", per_len}});
  }
  manifest["files"] = files;
  manifest["spec"] = config_to_text(cfg);
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %s\n", (out / "manifest.json").c_str());
  return kExitOk;
}

int cmd_train(const std::string& config_path, bool resume, const std::vector<std::string>& extras) {
  const RunConfig cfg = build_config(config_path, extras);
  Trainer trainer(cfg, load_dataset(cfg));
  if (resume) {
    if (cfg.out.dir.empty()) throw UsageError("--resume needs out.dir");
    if (trainer.resume(cfg.out.dir)) {
      std::printf("resuming at step %zu\n", trainer.step());
    } else {
      std::printf("no checkpoint in %s; starting fresh\n", cfg.out.dir.c_str());
    }
  }
  trainer.run();
  const auto loss = trailing_mean(trainer.records(), "eval", "loss", 1);
  std::printf("done: %zu steps, final eval loss %s\n", trainer.step(),
              loss ? std::to_string(*loss).c_str() : "n/a");
  return kExitOk;
}

int cmd_eval_exposure(const std::string& ckpt_arg, const std::string& config_arg, std::size_t samples,
                      std::optional<std::uint64_t> seed, const std::string& out_arg,
                      const std::vector<std::string>& extras) {
  auto [ckpt, cfg] = eval_inputs(ckpt_arg, config_arg, extras);
  const LoadedModel lm = load_for_eval(ckpt, cfg);
  const Dataset data = load_dataset(cfg);
  SamplerConfig sc;
  sc.n_steps = cfg.diffusion.sampler_steps;
  const auto rep = exposure_report(lm.model, &lm.fast0, data.eval, default_exposure_grid(), samples, sc,
                                   seed.value_or(cfg.train.seed));
  const std::string csv = exposure_csv(rep);
  const fs::path out = out_arg.empty() ? ckpt.parent_path() / "exposure.csv" : fs::path(out_arg);
  write_file(out, csv);
  std::fputs(csv.c_str(), stdout);
  std::printf("mean_r_eb,%.6f\n", rep.mean_ratio());
  return kExitOk;
}

int cmd_eval_retrieval(const std::string& ckpt_arg, const std::string& config_arg, const std::string& out_arg,
                       const std::vector<std::string>& extras) {
  auto [ckpt, cfg] = eval_inputs(ckpt_arg, config_arg, extras);
  const LoadedModel lm = load_for_eval(ckpt, cfg);
  const Dataset data = load_dataset(cfg);
  SamplerConfig sc;
  sc.n_steps = cfg.diffusion.sampler_steps;
  const auto table = retrieval_eval(data.eval, sampler_predictor(lm.model, &lm.fast0, sc, cfg.infer, cfg.inner,
                                                                 cfg.train.seed),
                                    retrieval_item_len(cfg.data));
  std::ostringstream os;
  os << "context_len,correct,total,accuracy\n";
  for (const auto& [len, b] : table) os << len << ',' << b.correct << ',' << b.total << ',' << b.accuracy() << '\n';
  os << "all,,," << overall_accuracy(table) << '\n';
  const fs::path out = out_arg.empty() ? ckpt.parent_path() / "retrieval.csv" : fs::path(out_arg);
  write_file(out, os.str());
  std::fputs(os.str().c_str(), stdout);
  return kExitOk;
}

int cmd_generate(const std::string& ckpt_arg, const std::string& config_arg, const std::string& prompt_path,
                 std::size_t response_len, const std::vector<std::string>& extras) {
  auto [ckpt, cfg] = eval_inputs(ckpt_arg, config_arg, extras);
  const LoadedModel lm = load_for_eval(ckpt, cfg);
  std::ifstream f(prompt_path);
  if (!f) throw UsageError("cannot open prompt file " + prompt_path);
  SamplerConfig sc;
  sc.n_steps = cfg.diffusion.sampler_steps;
  const TaskSpec spec = cfg.task_spec(cfg.data.context_lens.front());
  std::string line;
  std::size_t index = 0;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream is(line);
    Sequence prompt;
    long long v = 0;
    while (is >> v) {
      if (v < 0 || std::size_t(v) >= cfg.model.vocab_size) throw UsageError("prompt token out of vocabulary: " + line);
      prompt.push_back(TokenId(v));
    }
    if (!is.eof()) throw UsageError("prompt line is not a list of integers: " + line);
    const TaskPair pair{prompt, Sequence(response_len, 0)};
    const Sequence out = sampler_predictor(lm.model, &lm.fast0, sc, cfg.infer, cfg.inner, cfg.train.seed)(pair, index++);
    std::string ids, labels;
    for (TokenId t : out) {
      ids += (ids.empty() ? "" : " ") + std::to_string(t);
      labels += (labels.empty() ? "" : " ") + token_label(spec, t);
    }
    std::printf("%s\n%s\n", ids.c_str(), labels.c_str());
  }
  return kExitOk;
}

int cmd_gradcheck() {
  const auto results = gradcheck_all();
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-36s coords=%-4zu max_rel=%.3e max_abs=%.3e\n", r.pass ? "ok" : "FAIL", r.name.c_str(),
                r.checked, r.max_rel_err, r.max_abs_err);
    ok = ok && r.pass;
  }
  return ok ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MemDLM lab: masked diffusion LM with bi-level fast-weight training"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate .toks task files and a manifest");
  gen->add_option("--spec", spec_path, "Data spec (config format)")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  std::string config_path;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Run config")->required();
  train->add_flag("--resume", resume, "Continue from the newest checkpoint in out.dir");
  train->allow_extras();

  std::string ckpt, out_path;
  std::size_t samples = 4;
  std::optional<std::uint64_t> seed;
  auto* expo = app.add_subcommand("eval-exposure", "Exposure-bias ratio grid");
  expo->add_option("--ckpt", ckpt, "Checkpoint file or run directory")->required();
  expo->add_option("--config", config_path, "Run config (default: resolved-config.cfg beside the checkpoint)");
  expo->add_option("--samples", samples, "Static-mask samples per pair and grid point");
  expo->add_option("--seed", seed, "Probe seed (default: train.seed)");
  expo->add_option("--out", out_path, "CSV output (default: exposure.csv beside the checkpoint)");
  expo->allow_extras();

  auto* retr = app.add_subcommand("eval-retrieval", "Per-context-length retrieval accuracy");
  retr->add_option("--ckpt", ckpt, "Checkpoint file or run directory")->required();
  retr->add_option("--config", config_path, "Run config (default: resolved-config.cfg beside the checkpoint)");
  retr->add_option("--out", out_path, "CSV output (default: retrieval.csv beside the checkpoint)");
  retr->allow_extras();

  std::string prompt_path;
  std::size_t response_len = 1;
  auto* gen_cmd = app.add_subcommand("generate", "Denoise responses for prompts (one per line, token ids)");
  gen_cmd->add_option("--ckpt", ckpt, "Checkpoint file or run directory")->required();
  gen_cmd->add_option("--config", config_path, "Run config (default: resolved-config.cfg beside the checkpoint)");
  gen_cmd->add_option("--prompt", prompt_path, "Prompt file")->required();
  gen_cmd->add_option("--response-len", response_len, "Response length in tokens");
  gen_cmd->allow_extras();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(spec_path, out_dir);
    if (*train) return cmd_train(config_path, resume, train->remaining());
    if (*expo) return cmd_eval_exposure(ckpt, config_path, samples, seed, out_path, expo->remaining());
    if (*retr) return cmd_eval_retrieval(ckpt, config_path, out_path, retr->remaining());
    if (*gen_cmd) return cmd_generate(ckpt, config_path, prompt_path, response_len, gen_cmd->remaining());
    if (*grad) return cmd_gradcheck();
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const memdlm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
