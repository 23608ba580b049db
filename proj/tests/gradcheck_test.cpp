// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "memdlm/gradcheck.hpp"

namespace memdlm {
namespace {

TEST(Gradcheck, AllChecksPass) {
  const auto results = gradcheck_all();
  ASSERT_GT(results.size(), 10u);
  std::set<std::string> names;
  for (const auto& r : results) {
    EXPECT_TRUE(r.pass) << r.name << " rel " << r.max_rel_err << " abs " << r.max_abs_err;
    EXPECT_GT(r.checked, 0u) << r.name;
    names.insert(r.name);
  }
  EXPECT_EQ(names.size(), results.size());
}

TEST(Gradcheck, DetectsWrongGradient) {
  BasicTensor<double> x({3}, {0.5, -1.0, 2.0});
  GradProblem p;
  p.name = "cube";
  p.params = {&x};
  p.value = [&] {
    double s = 0.0;
    for (double v : x.data()) s += v * v * v;
    return s;
  };
  p.analytic = [&] {
    BasicTensor<double> g({3});
    for (std::size_t i = 0; i < 3; ++i) g[i] = 3.0 * x[i] * x[i];
    return std::vector<BasicTensor<double>>{g};
  };
  const auto good = run_gradcheck(p, {}, 0);
  EXPECT_TRUE(good.pass);
  EXPECT_EQ(good.checked, 3u);
  p.analytic = [&] {
    BasicTensor<double> g({3});
    for (std::size_t i = 0; i < 3; ++i) g[i] = 3.0 * x[i] * x[i] * 1.01;
    return std::vector<BasicTensor<double>>{g};
  };
  EXPECT_FALSE(run_gradcheck(p, {}, 0).pass);
  p.analytic = [] { return std::vector<BasicTensor<double>>{}; };
  EXPECT_THROW(run_gradcheck(p, {}, 0), Error);
}

}  // namespace
}  // namespace memdlm
