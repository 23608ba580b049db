// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "MEMDLM01"
//   u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f32 data
// Fast weights use the "fast/" name prefix and are optional.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "memdlm/model.hpp"
#include "memdlm/tensor.hpp"

namespace memdlm {

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'E', 'M', 'D', 'L', 'M', '0', '1'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, std::uint32_t(tensors.size()));
  for (const auto& nt : tensors) {
    detail::put_u32(out, std::uint32_t(nt.name.size()));
    out += nt.name;
    detail::put_u32(out, std::uint32_t(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) detail::put_u64(out, d);
    for (float f : nt.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& buf) {
  detail::ByteReader r(buf);
  const std::string magic = r.bytes(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw ParseError("not a MEMDLM01 checkpoint");
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = std::size_t(r.u64());
    const std::size_t n = shape_numel(shape);
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& f : data) f = std::bit_cast<float>(r.u32());
    nt.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint tensors");
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

// Model hyperparameters travel with the weights so a checkpoint is self-describing.
inline Tensor encode_model_config(const ModelConfig& c) {
  return Tensor({7}, {float(c.vocab_size), float(c.d_model), float(c.n_heads), float(c.n_layers),
                      float(c.max_len), float(c.ffn_mult), float(c.init_std)});
}

inline ModelConfig decode_model_config(const Tensor& t) {
  if (t.size() != 7) throw ParseError("meta/model has the wrong length");
  ModelConfig c;
  c.vocab_size = std::size_t(t[0]);
  c.d_model = std::size_t(t[1]);
  c.n_heads = std::size_t(t[2]);
  c.n_layers = std::size_t(t[3]);
  c.max_len = std::size_t(t[4]);
  c.ffn_mult = std::size_t(t[5]);
  c.init_std = t[6];
  return c;
}

inline std::vector<NamedTensor> model_tensors(const Model& model, const FastWeights* fast = nullptr) {
  std::vector<NamedTensor> out;
  out.push_back({"meta/model", encode_model_config(model.config())});
  for (const auto& p : model.parameters()) out.push_back({p.name, *p.tensor});
  if (fast) {
    auto names = fast->param_names();
    auto params = fast->params();
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back({names[i], *params[i]});
  }
  return out;
}

inline const Tensor* find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& nt : ts) {
    if (nt.name == name) return &nt.tensor;
  }
  return nullptr;
}

/// Rebuilds θ from a checkpoint; every parameter must be present with its exact shape.
inline Model model_from_tensors(const std::vector<NamedTensor>& ts) {
  const Tensor* meta = find_tensor(ts, "meta/model");
  if (!meta) throw ParseError("checkpoint lacks meta/model");
  Model m = Model::init(decode_model_config(*meta));
  for (auto& p : m.parameters()) {
    const Tensor* t = find_tensor(ts, p.name);
    if (!t) throw ParseError("checkpoint lacks parameter " + p.name);
    if (t->shape() != p.tensor->shape()) {
      throw ParseError("parameter " + p.name + " has shape " + shape_str(t->shape()) + ", expected " +
                       shape_str(p.tensor->shape()));
    }
    *p.tensor = *t;
  }
  return m;
}

/// Copies stored fast weights into `fast` when the checkpoint carries them.
inline bool load_fast_tensors(const std::vector<NamedTensor>& ts, FastWeights& fast) {
  auto names = fast.param_names();
  auto params = fast.params();
  bool any = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (const Tensor* t = find_tensor(ts, names[i])) {
      if (t->shape() != params[i]->shape()) throw ParseError("fast tensor " + names[i] + " has the wrong shape");
      *params[i] = *t;
      any = true;
    }
  }
  return any;
}

}  // namespace memdlm
