// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "memdlm/tensor.hpp"

namespace memdlm {

using Json = nlohmann::ordered_json;

/// One JSONL metrics line: phase, step and seed first, then named values.
struct MetricRecord {
  std::string phase;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> values;
  std::optional<double> wall_ms;

  MetricRecord& add(std::string name, double v) {
    values.emplace_back(std::move(name), v);
    return *this;
  }

  Json to_json() const {
    Json j;
    j["phase"] = phase;
    j["step"] = step;
    j["seed"] = seed;
    for (const auto& [k, v] : values) j[k] = v;
    if (wall_ms) j["wall_ms"] = *wall_ms;
    return j;
  }

  std::optional<double> get(const std::string& name) const {
    for (const auto& [k, v] : values) {
      if (k == name) return v;
    }
    return std::nullopt;
  }
};

/// Appends JSON objects one per line, flushed per write.
class JsonlWriter {
 public:
  JsonlWriter() = default;
  explicit JsonlWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open " + path.string());
  }
  bool is_open() const { return out_.is_open(); }
  void write(const Json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed on " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<Json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Mean of `field` over the last `window` records of `phase`.
inline std::optional<double> trailing_mean(const std::vector<MetricRecord>& records, const std::string& phase,
                                           const std::string& field, std::size_t window) {
  double s = 0.0;
  std::size_t n = 0;
  for (auto it = records.rbegin(); it != records.rend() && n < window; ++it) {
    if (it->phase != phase) continue;
    if (auto v = it->get(field)) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

/// Rewrites a JSONL file keeping only objects whose "step" is below `step`.
inline void truncate_jsonl(const std::filesystem::path& path, std::size_t step) {
  if (!std::filesystem::exists(path)) return;
  const auto rows = read_jsonl(path);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    for (const auto& j : rows) {
      if (j.contains("step") && j["step"].get<std::size_t>() < step) f << j.dump() << '\n';
    }
    if (!f) throw IoError("cannot rewrite " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace memdlm
