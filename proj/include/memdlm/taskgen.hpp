// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic long-context tasks over a partitioned token vocabulary, and the
// .toks text format:
//
//   memdlm-toks v1 vocab=<V>
//   P: <ids> | R: <ids>

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "memdlm/rng.hpp"
#include "memdlm/tensor.hpp"

namespace memdlm {

enum class TaskKind { kKvNiah, kVariableTracking, kCopy };

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kKvNiah: return "kv_niah";
    case TaskKind::kVariableTracking: return "variable_tracking";
    case TaskKind::kCopy: return "copy";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "kv_niah") return TaskKind::kKvNiah;
  if (s == "variable_tracking") return TaskKind::kVariableTracking;
  if (s == "copy") return TaskKind::kCopy;
  throw ConfigError("unknown task kind '" + s + "'");
}

/// Half-open token-id range [lo, hi).
struct Alphabet {
  TokenId lo = 0;
  TokenId hi = 0;

  std::size_t size() const { return hi > lo ? std::size_t(hi - lo) : 0; }
  bool contains(TokenId t) const { return t >= lo && t < hi; }
  TokenId at(std::size_t i) const { return TokenId(lo + TokenId(i)); }
  friend bool operator==(const Alphabet&, const Alphabet&) = default;
};

struct TaskSpec {
  TaskKind kind = TaskKind::kKvNiah;
  std::size_t context_len = 64;  // prompt length
  std::size_t n_pairs = 4;       // kv_niah needles
  std::size_t n_queries = 1;     // kv_niah keys asked in one prompt
  std::size_t value_len = 1;     // tokens per value
  std::size_t chain_len = 2;     // variable_tracking aliases
  std::size_t span_len = 4;      // copy span
  std::size_t vocab_size = 64;
  Alphabet markers{0, 4};
  Alphabet keys{4, 20};
  Alphabet values{20, 36};
  Alphabet filler{36, 64};

  TokenId query_token() const { return markers.at(0); }
  TokenId assign_token() const { return markers.at(1); }
  TokenId copy_begin() const { return markers.at(2); }
  TokenId copy_end() const { return markers.at(3); }

  void validate() const {
    if (markers.size() < 4) throw ConfigError("taskgen: the marker alphabet needs 4 tokens");
    const Alphabet all[] = {markers, keys, values, filler};
    for (const auto& a : all) {
      if (a.size() == 0) throw ConfigError("taskgen: empty alphabet");
      if (a.lo < 0 || std::size_t(a.hi) > vocab_size) throw ConfigError("taskgen: alphabet outside [0, V)");
    }
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) {
        if (all[i].lo < all[j].hi && all[j].lo < all[i].hi) throw ConfigError("taskgen: alphabets overlap");
      }
    }
    if (value_len == 0) throw ConfigError("taskgen: value_len must be positive");
  }
};

/// Readable name of a token: marker names, k<i>, v<i>, f<i>, or the raw id.
inline std::string token_label(const TaskSpec& spec, TokenId t) {
  static const char* const kMarkers[] = {"QUERY", "ASSIGN", "COPY_BEGIN", "COPY_END"};
  if (spec.markers.contains(t) && std::size_t(t - spec.markers.lo) < 4) return kMarkers[t - spec.markers.lo];
  if (spec.keys.contains(t)) return "k" + std::to_string(t - spec.keys.lo);
  if (spec.values.contains(t)) return "v" + std::to_string(t - spec.values.lo);
  if (spec.filler.contains(t)) return "f" + std::to_string(t - spec.filler.lo);
  if (std::size_t(t) == spec.vocab_size) return "MASK";
  return "#" + std::to_string(t);
}

struct TaskPair {
  Sequence prompt;
  Sequence response;
  friend bool operator==(const TaskPair&, const TaskPair&) = default;
};

namespace detail {

/// Places `blocks` in order among `n_filler` random filler tokens; every
/// interleaving is equally likely. Returns the prompt and block start offsets.
inline std::pair<Sequence, std::vector<std::size_t>> interleave(const std::vector<Sequence>& blocks,
                                                                std::size_t n_filler, const Alphabet& filler,
                                                                Rng& rng) {
  const std::size_t items = n_filler + blocks.size();
  auto slots = rng.sample_without_replacement(items, blocks.size());
  std::sort(slots.begin(), slots.end());
  Sequence out;
  std::vector<std::size_t> starts;
  std::size_t b = 0;
  for (std::size_t i = 0; i < items; ++i) {
    if (b < slots.size() && slots[b] == i) {
      starts.push_back(out.size());
      out.insert(out.end(), blocks[b].begin(), blocks[b].end());
      ++b;
    } else {
      out.push_back(filler.at(rng.uniform_int(filler.size())));
    }
  }
  return {std::move(out), std::move(starts)};
}

inline std::vector<TokenId> draw_keys(const TaskSpec& spec, std::size_t n, Rng& rng) {
  if (n > spec.keys.size()) {
    throw CapacityError("taskgen: " + std::to_string(n) + " distinct keys requested from an alphabet of " +
                        std::to_string(spec.keys.size()));
  }
  std::vector<TokenId> out;
  for (std::size_t i : rng.sample_without_replacement(spec.keys.size(), n)) out.push_back(spec.keys.at(i));
  return out;
}

inline Sequence draw_value(const TaskSpec& spec, Rng& rng) {
  Sequence v(spec.value_len);
  for (auto& t : v) t = spec.values.at(rng.uniform_int(spec.values.size()));
  return v;
}

inline std::size_t filler_budget(std::size_t context_len, std::size_t used, const char* what) {
  if (used > context_len) {
    throw CapacityError(std::string("taskgen: ") + what + " needs " + std::to_string(used) +
                        " tokens but context_len is " + std::to_string(context_len));
  }
  return context_len - used;
}

}  // namespace detail

/// Needles [key, v_1..v_w] hidden in filler, closed by [QUERY, k_1..k_q]
/// for q distinct needle keys; the response is their values in query order.
inline TaskPair gen_kv_niah(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.n_pairs == 0) throw ConfigError("taskgen: n_pairs must be positive");
  if (spec.n_queries == 0 || spec.n_queries > spec.n_pairs) {
    throw ConfigError("taskgen: n_queries must lie in [1, n_pairs]");
  }
  const std::size_t width = 1 + spec.value_len;
  const std::size_t n_filler =
      detail::filler_budget(spec.context_len, spec.n_pairs * width + 1 + spec.n_queries, "kv_niah");
  const auto keys = detail::draw_keys(spec, spec.n_pairs, rng);
  std::vector<Sequence> blocks;
  for (TokenId k : keys) {
    Sequence b{k};
    const Sequence v = detail::draw_value(spec, rng);
    b.insert(b.end(), v.begin(), v.end());
    blocks.push_back(std::move(b));
  }
  auto [prompt, starts] = detail::interleave(blocks, n_filler, spec.filler, rng);
  const auto asked = spec.n_queries == 1 ? std::vector<std::size_t>{rng.uniform_int(spec.n_pairs)}
                                         : rng.sample_without_replacement(spec.n_pairs, spec.n_queries);
  prompt.push_back(spec.query_token());
  Sequence response;
  for (std::size_t q : asked) {
    prompt.push_back(keys[q]);
    response.insert(response.end(), blocks[q].begin() + 1, blocks[q].end());
  }
  return {std::move(prompt), std::move(response)};
}

/// Alias chain v1 = c, v2 = v1, ... written as [dst, src] blocks in chain
/// order among filler; the query names the last alias and the answer is c.
inline TaskPair gen_variable_tracking(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.chain_len == 0) throw ConfigError("taskgen: chain_len must be >= 1");
  const std::size_t used = (1 + spec.value_len) + 2 * (spec.chain_len - 1) + 2;
  const std::size_t n_filler = detail::filler_budget(spec.context_len, used, "variable_tracking");
  const auto vars = detail::draw_keys(spec, spec.chain_len, rng);
  const Sequence root = detail::draw_value(spec, rng);
  std::vector<Sequence> blocks;
  Sequence first{vars[0]};
  first.insert(first.end(), root.begin(), root.end());
  blocks.push_back(std::move(first));
  for (std::size_t j = 1; j < spec.chain_len; ++j) blocks.push_back({vars[j], vars[j - 1]});
  auto [prompt, starts] = detail::interleave(blocks, n_filler, spec.filler, rng);
  prompt.push_back(spec.query_token());
  prompt.push_back(vars.back());
  return {std::move(prompt), root};
}

/// A value-alphabet span between COPY_BEGIN and COPY_END; the answer repeats it.
inline TaskPair gen_copy(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.span_len == 0) throw ConfigError("taskgen: span_len must be positive");
  const std::size_t n_filler = detail::filler_budget(spec.context_len, spec.span_len + 2, "copy");
  Sequence span(spec.span_len);
  for (auto& t : span) t = spec.values.at(rng.uniform_int(spec.values.size()));
  Sequence block{spec.copy_begin()};
  block.insert(block.end(), span.begin(), span.end());
  block.push_back(spec.copy_end());
  auto [prompt, starts] = detail::interleave({block}, n_filler, spec.filler, rng);
  return {std::move(prompt), std::move(span)};
}

inline TaskPair gen_task(const TaskSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case TaskKind::kKvNiah: return gen_kv_niah(spec, rng);
    case TaskKind::kVariableTracking: return gen_variable_tracking(spec, rng);
    case TaskKind::kCopy: return gen_copy(spec, rng);
  }
  throw ConfigError("unknown task kind");
}

/// Instance i draws from its own stream keyed by (seed, split, i).
inline std::vector<TaskPair> gen_tasks(const TaskSpec& spec, std::size_t count, std::uint64_t seed,
                                       std::uint64_t split) {
  std::vector<TaskPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, Stream::kTaskgen, split, spec.context_len, i));
    out.push_back(gen_task(spec, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validity scan

/// Reference interpreter: parses [dst, src] blocks left to right, then
/// follows aliases from the queried variable to its constant.
inline std::optional<Sequence> resolve_variable(const TaskSpec& spec, const Sequence& prompt) {
  if (prompt.size() < 2 || prompt[prompt.size() - 2] != spec.query_token()) return std::nullopt;
  const std::size_t body = prompt.size() - 2;
  std::map<TokenId, Sequence> src;
  for (std::size_t i = 0; i < body;) {
    if (!spec.keys.contains(prompt[i])) {
      ++i;
      continue;
    }
    if (src.count(prompt[i]) || i + 1 >= body) return std::nullopt;
    const std::size_t w = spec.values.contains(prompt[i + 1]) ? spec.value_len : 1;
    if (i + 1 + w > body) return std::nullopt;
    src[prompt[i]] = Sequence(prompt.begin() + std::ptrdiff_t(i + 1), prompt.begin() + std::ptrdiff_t(i + 1 + w));
    i += 1 + w;
  }
  TokenId cur = prompt.back();
  for (std::size_t hops = 0; hops <= src.size(); ++hops) {
    auto it = src.find(cur);
    if (it == src.end()) return std::nullopt;
    if (spec.values.contains(it->second.front())) return it->second;
    cur = it->second.front();
  }
  return std::nullopt;  // cycle
}

/// Empty when the pair is a well-formed instance of spec.kind; otherwise the reason.
inline std::string check_pair(const TaskSpec& spec, const TaskPair& p) {
  for (TokenId t : p.prompt) {
    if (t < 0 || std::size_t(t) >= spec.vocab_size) return "prompt token outside vocabulary";
  }
  if (p.prompt.size() != spec.context_len) return "prompt length differs from context_len";
  switch (spec.kind) {
    case TaskKind::kKvNiah: {
      const std::size_t nq = spec.n_queries;
      if (p.prompt.size() < nq + 1 || p.prompt[p.prompt.size() - nq - 1] != spec.query_token()) {
        return "missing query";
      }
      if (p.response.size() != nq * spec.value_len) return "response length differs from n_queries·value_len";
      const std::size_t body = p.prompt.size() - nq - 1;
      std::map<TokenId, std::size_t> where;
      for (std::size_t i = 0; i < body; ++i) {
        if (!spec.keys.contains(p.prompt[i])) continue;
        if (where.count(p.prompt[i])) return "duplicate needle key";
        where[p.prompt[i]] = i;
      }
      for (std::size_t q = 0; q < nq; ++q) {
        const TokenId key = p.prompt[body + 1 + q];
        auto it = where.find(key);
        if (it == where.end()) return "queried key is not planted";
        const std::size_t at = it->second;
        if (at + 1 + spec.value_len > body) return "needle truncated";
        const Sequence gold(p.prompt.begin() + std::ptrdiff_t(at + 1),
                            p.prompt.begin() + std::ptrdiff_t(at + 1 + spec.value_len));
        const Sequence got(p.response.begin() + std::ptrdiff_t(q * spec.value_len),
                           p.response.begin() + std::ptrdiff_t((q + 1) * spec.value_len));
        if (gold != got) return "response differs from the planted value";
      }
      return {};
    }
    case TaskKind::kVariableTracking: {
      auto r = resolve_variable(spec, p.prompt);
      if (!r) return "alias chain does not resolve";
      if (*r != p.response) return "response differs from the resolved constant";
      return {};
    }
    case TaskKind::kCopy: {
      auto b = std::find(p.prompt.begin(), p.prompt.end(), spec.copy_begin());
      if (b == p.prompt.end()) return "missing COPY_BEGIN";
      auto e = std::find(b, p.prompt.end(), spec.copy_end());
      if (e == p.prompt.end()) return "missing COPY_END";
      if (Sequence(b + 1, e) != p.response) return "response differs from the marked span";
      return {};
    }
  }
  return "unknown task kind";
}

// ---------------------------------------------------------------------------
// .toks files

inline constexpr const char* kToksHeader = "memdlm-toks v1";

struct TaskFile {
  std::size_t vocab_size = 0;
  std::vector<TaskPair> pairs;
};

inline std::string format_toks(std::size_t vocab_size, const std::vector<TaskPair>& pairs) {
  std::ostringstream os;
  os << kToksHeader << " vocab=" << vocab_size << "\n";
  for (const auto& p : pairs) {
    os << "P:";
    for (TokenId t : p.prompt) os << ' ' << t;
    os << " | R:";
    for (TokenId t : p.response) os << ' ' << t;
    os << "\n";
  }
  return os.str();
}

namespace detail {

inline Sequence parse_ids(const std::string& field, std::size_t line_no, std::size_t vocab) {
  std::istringstream is(field);
  Sequence out;
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(tok, &used);
    } catch (...) {
      used = 0;
    }
    if (used != tok.size()) throw ParseError("line " + std::to_string(line_no) + ": bad token id '" + tok + "'");
    if (v < 0 || std::size_t(v) >= vocab) {
      throw ParseError("line " + std::to_string(line_no) + ": token id " + tok + " outside vocab");
    }
    out.push_back(TokenId(v));
  }
  return out;
}

}  // namespace detail

inline TaskFile parse_toks(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) throw ParseError("line 1: empty .toks file");
  const std::string prefix = std::string(kToksHeader) + " vocab=";
  if (line.rfind(prefix, 0) != 0) throw ParseError("line 1: expected '" + prefix + "<V>'");
  TaskFile f;
  try {
    std::size_t used = 0;
    const std::string v = line.substr(prefix.size());
    f.vocab_size = std::stoul(v, &used);
    if (used != v.size() || f.vocab_size == 0) throw ParseError("");
  } catch (...) {
    throw ParseError("line 1: bad vocab size");
  }
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto bar = line.find(" | R:");
    if (line.rfind("P:", 0) != 0 || bar == std::string::npos) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 'P: <ids> | R: <ids>'");
    }
    TaskPair p;
    p.prompt = detail::parse_ids(line.substr(2, bar - 2), line_no, f.vocab_size);
    p.response = detail::parse_ids(line.substr(bar + 5), line_no, f.vocab_size);
    if (p.response.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty response");
    f.pairs.push_back(std::move(p));
  }
  return f;
}

inline void write_toks(const std::filesystem::path& path, std::size_t vocab_size, const std::vector<TaskPair>& pairs) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << format_toks(vocab_size, pairs);
  if (!f) throw IoError("short write to " + path.string());
}

inline TaskFile read_toks(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return parse_toks(text);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace memdlm
