// Copyright 2026 The MemDLM Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "memdlm/autodiff.hpp"
#include "memdlm/rng.hpp"

namespace memdlm {
namespace {

template <typename T>
BasicTensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  BasicTensor<T> t(std::move(s));
  Rng r(seed);
  for (auto& v : t.data()) v = T(r.normal() * scale);
  return t;
}

template <typename T>
using ScalarFn = std::function<DiffTensor<T>(Tape<T>&, std::vector<DiffTensor<T>>&)>;

/// Max relative error between backward and central differences over every
/// coordinate of every input.
template <typename T>
double fd_max_rel_error(std::vector<BasicTensor<T>> inputs, const ScalarFn<T>& f, double h, double floor) {
  std::vector<BasicTensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<DiffTensor<T>> leaves;
    for (auto& x : inputs) leaves.push_back(tape.leaf(x, true));
    auto y = f(tape, leaves);
    tape.backward(y);
    for (auto& l : leaves) {
      BasicTensor<T> g(l.shape());
      if (auto gv = l.grad()) std::copy(gv->begin(), gv->end(), g.data().begin());
      analytic.push_back(std::move(g));
    }
  }
  auto eval = [&]() {
    Tape<T> tape(false);
    std::vector<DiffTensor<T>> leaves;
    for (auto& x : inputs) leaves.push_back(tape.leaf(x, false));
    return double(f(tape, leaves).item());
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const T keep = inputs[i][j];
      inputs[i][j] = T(double(keep) + h);
      const double up = eval();
      inputs[i][j] = T(double(keep) - h);
      const double dn = eval();
      inputs[i][j] = keep;
      const double num = (up - dn) / (2.0 * h);
      const double ana = double(analytic[i][j]);
      const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

TEST(Matmul, IdentityTimesX) {
  Tape<float> tape(false);
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  const Tensor x = random_tensor<float>({3, 4}, 1);
  auto y = matmul(tape.leaf(eye, false), tape.leaf(x, false));
  EXPECT_EQ(y.to_tensor(), x);
}

TEST(Matmul, ScalarProductAndGrads) {
  Tape<float> tape;
  Tensor a({1, 1}, std::vector<float>{2}), b({1, 1}, std::vector<float>{3});
  auto la = tape.leaf(a, true), lb = tape.leaf(b, true);
  auto y = sum(matmul(la, lb));
  EXPECT_EQ(y.item(), 6.0f);
  tape.backward(y);
  EXPECT_EQ((*la.grad())[0], 3.0f);
  EXPECT_EQ((*lb.grad())[0], 2.0f);
}

/// Entries on a 1/8 grid keep every product and difference exact in float.
Tensor dyadic_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  Rng r(seed);
  for (auto& v : t.data()) v = float(int(r.uniform_int(33)) - 16) / 8.0f;
  return t;
}

TEST(Matmul, GradientMatchesFiniteDifferencesFloat) {
  ScalarFn<float> f = [](Tape<float>&, std::vector<DiffTensor<float>>& x) { return sum(matmul(x[0], x[1])); };
  const double h = std::ldexp(1.0, -10);
  EXPECT_LT(fd_max_rel_error<float>({dyadic_tensor({3, 4}, 2), dyadic_tensor({4, 2}, 3)}, f, h, 1e-2), 1e-4);
}

TEST(Matmul, GradOfSumIsColumnSumOfB) {
  Tape<double> tape;
  const auto a = random_tensor<double>({2, 3}, 4);
  const auto b = random_tensor<double>({3, 5}, 5);
  auto la = tape.leaf(a, true);
  tape.backward(sum(matmul(la, tape.leaf(b, false))));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      double row = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row += b.at(k, j);
      EXPECT_NEAR((*la.grad())[i * 3 + k], row, 1e-12);
    }
  }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Tape<float> tape(false);
  Tensor a({2, 3}), b({2, 3});
  EXPECT_THROW(matmul(tape.leaf(a, false), tape.leaf(b, false)), DimensionError);
}

TEST(Softmax, ConstantRowIsUniform) {
  Tape<double> tape(false);
  BasicTensor<double> x({2, 5}, 3.0);
  const auto y = softmax_rows(tape.leaf(x, false)).to_tensor();
  for (double v : y.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Softmax, LargeEntryDominates) {
  Tape<double> tape(false);
  BasicTensor<double> x({1, 2}, std::vector<double>{0.0, 1000.0});
  const auto y = softmax_rows(tape.leaf(x, false)).to_tensor();
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y[0]));
}

TEST(Softmax, JacobianVectorProductMatchesFiniteDifferences) {
  const auto w = random_tensor<double>({3, 4}, 7);
  ScalarFn<double> f = [&](Tape<double>& t, std::vector<DiffTensor<double>>& x) {
    return sum(mul(softmax_rows(x[0]), t.constant(w)));
  };
  EXPECT_LT(fd_max_rel_error<double>({random_tensor<double>({3, 4}, 8)}, f, 1e-6, 1e-6), 1e-4);
}

TEST(CrossEntropy, UniformLogitsTenPositions) {
  Tape<float> tape(false);
  Tensor z({12, 64});
  Sequence tgt(12, 5);
  std::vector<std::size_t> pos{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const float v = cross_entropy_masked(tape.leaf(z, false), tgt, pos).item();
  EXPECT_NEAR(v, 10.0 * std::log(64.0), 1e-4);
  EXPECT_NEAR(v, 41.589, 1e-3);
}

TEST(CrossEntropy, EmptyPositionsIsZero) {
  Tape<float> tape;
  const Tensor z = random_tensor<float>({4, 6}, 9);
  auto lz = tape.leaf(z, true);
  auto loss = cross_entropy_masked(lz, Sequence{0, 1, 2, 3}, std::vector<std::size_t>{});
  EXPECT_EQ(loss.item(), 0.0f);
  tape.backward(loss);
  if (auto g = lz.grad()) {
    for (float v : *g) EXPECT_EQ(v, 0.0f);
  }
}

TEST(CrossEntropy, MatchesBruteForceLogSoftmax) {
  Tape<double> tape(false);
  const auto z = random_tensor<double>({3, 5}, 10);
  const Sequence tgt{4, 0, 2};
  const std::vector<std::size_t> pos{0, 2};
  double expect = 0.0;
  for (std::size_t p : pos) {
    double s = 0.0;
    for (std::size_t v = 0; v < 5; ++v) s += std::exp(z.at(p, v));
    expect += -(z.at(p, std::size_t(tgt[p])) - std::log(s));
  }
  EXPECT_NEAR(cross_entropy_masked(tape.leaf(z, false), tgt, pos).item(), expect, 1e-12);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  ScalarFn<double> f = [](Tape<double>&, std::vector<DiffTensor<double>>& x) {
    return cross_entropy_masked(x[0], Sequence{1, 3, 0, 2}, std::vector<std::size_t>{0, 1, 3});
  };
  EXPECT_LT(fd_max_rel_error<double>({random_tensor<double>({4, 5}, 11)}, f, 1e-6, 1e-6), 1e-4);
}

TEST(Elementwise, LayerNormOfConstantIsZero) {
  Tape<double> tape(false);
  BasicTensor<double> x({2, 6}, 4.0);
  const auto y = layer_norm(tape.leaf(x, false)).to_tensor();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, GeluOfZeroIsZero) {
  Tape<double> tape(false);
  BasicTensor<double> x({1, 1}, 0.0);
  EXPECT_EQ(gelu(tape.leaf(x, false)).to_tensor()[0], 0.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  const auto w = random_tensor<double>({3, 4}, 12);
  auto project = [&](Tape<double>& t, const DiffTensor<double>& y) { return sum(mul(y, t.constant(w))); };
  const std::vector<std::pair<const char*, ScalarFn<double>>> cases = {
      {"layer_norm", [&](Tape<double>& t, auto& x) { return project(t, layer_norm(x[0], x[1], x[2])); }},
      {"gelu", [&](Tape<double>& t, auto& x) { return project(t, gelu(x[0])); }},
      {"add", [&](Tape<double>& t, auto& x) { return project(t, add(x[0], x[0])); }},
      {"scale", [&](Tape<double>& t, auto& x) { return project(t, scale(x[0], 2.5)); }},
      {"add_rowwise", [&](Tape<double>& t, auto& x) { return project(t, add_rowwise(x[0], x[1])); }},
  };
  for (const auto& [name, f] : cases) {
    std::vector<BasicTensor<double>> in{random_tensor<double>({3, 4}, 13), random_tensor<double>({4}, 14),
                                        random_tensor<double>({4}, 15)};
    EXPECT_LT(fd_max_rel_error<double>(in, f, 1e-6, 1e-6), 1e-4) << name;
  }
}

TEST(Elementwise, EmbeddingLookupGradient) {
  const Sequence ids{2, 0, 2};
  const auto w = random_tensor<double>({3, 4}, 16);
  ScalarFn<double> f = [&](Tape<double>& t, auto& x) { return sum(mul(embedding_lookup(x[0], ids), t.constant(w))); };
  EXPECT_LT(fd_max_rel_error<double>({random_tensor<double>({5, 4}, 17)}, f, 1e-6, 1e-6), 1e-4);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  const auto w = random_tensor<double>({5, 4}, 18);
  ScalarFn<double> f = [&](Tape<double>& t, auto& x) {
    return sum(mul(self_attention(x[0], x[1], x[2], 2), t.constant(w)));
  };
  std::vector<BasicTensor<double>> in{random_tensor<double>({5, 4}, 19), random_tensor<double>({5, 4}, 20),
                                      random_tensor<double>({5, 4}, 21)};
  EXPECT_LT(fd_max_rel_error<double>(in, f, 1e-6, 1e-6), 1e-4);
}

TEST(Kl, MatchesExplicitSummation) {
  Tape<double> tape(false);
  const auto zs = random_tensor<double>({2, 4}, 22);
  const auto zt = random_tensor<double>({2, 4}, 23);
  auto probs = [](const BasicTensor<double>& z, std::size_t r) {
    std::vector<double> p(4);
    double s = 0.0;
    for (std::size_t v = 0; v < 4; ++v) s += std::exp(z.at(r, v));
    for (std::size_t v = 0; v < 4; ++v) p[v] = std::exp(z.at(r, v)) / s;
    return p;
  };
  double fwd = 0.0, rev = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    const auto ps = probs(zs, r), pt = probs(zt, r);
    for (std::size_t v = 0; v < 4; ++v) {
      fwd += pt[v] * std::log(pt[v] / ps[v]);
      rev += ps[v] * std::log(ps[v] / pt[v]);
    }
  }
  const std::vector<std::size_t> pos{0, 1};
  EXPECT_NEAR(kl_masked(tape.leaf(zs, false), zt, pos, KlDirection::kForward).item(), fwd, 1e-12);
  EXPECT_NEAR(kl_masked(tape.leaf(zs, false), zt, pos, KlDirection::kReverse).item(), rev, 1e-12);
}

TEST(Distances, ZeroAgainstThemselves) {
  Tape<double> tape(false);
  const auto h = random_tensor<double>({3, 6}, 24);
  const std::vector<std::size_t> pos{0, 1, 2};
  EXPECT_NEAR(cosine_distance_masked(tape.leaf(h, false), h, pos).item(), 0.0, 1e-14);
  EXPECT_EQ(mse_masked(tape.leaf(h, false), h, pos).item(), 0.0);
  EXPECT_EQ(kl_masked(tape.leaf(h, false), h, pos, KlDirection::kForward).item(), 0.0);
}

TEST(Tape, BackwardTwiceThrows) {
  Tape<double> tape;
  BasicTensor<double> x({1}, 1.0);
  auto y = sum(tape.leaf(x, true));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), Error);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape<double> tape;
  BasicTensor<double> x({2}, 1.0);
  EXPECT_THROW(tape.backward(tape.leaf(x, true)), DimensionError);
}

TEST(Tape, MixingTapesThrows) {
  Tape<double> a(false), b(false);
  BasicTensor<double> x({2, 2}, 1.0);
  EXPECT_THROW(add(a.leaf(x, false), b.leaf(x, false)), Error);
}

}  // namespace
}  // namespace memdlm
