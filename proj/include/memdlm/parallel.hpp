// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace memdlm {

/// Worker cap from MEMDLM_THREADS; 1 when unset or invalid.
inline std::size_t worker_threads() {
  const char* env = std::getenv("MEMDLM_THREADS");
  if (!env) return 1;
  try {
    const long v = std::stol(env);
    return v > 0 ? std::size_t(v) : 1;
  } catch (...) {
    return 1;
  }
}

/// Evaluates fn(i) for i in [0, n) and returns the results in index order.
/// Each index runs on exactly one thread; callers reduce the results in order,
/// so the outcome does not depend on the thread count.
template <typename F>
auto parallel_map(std::size_t n, F&& fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out(n);
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          out[i] = fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace memdlm
