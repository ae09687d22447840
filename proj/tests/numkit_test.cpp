// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/numkit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

namespace ylab {
namespace {

TEST(Softmax, UniformForEqualLogits) {
  const std::vector<double> x = {0, 0, 0, 0};
  for (double p : softmax(x)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Softmax, LargeLogitsStayFinite) {
  const std::vector<double> x = {1000, 0};
  const auto p = softmax(x);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
}

TEST(Softmax, MatchesClosedForm) {
  const std::vector<double> x = {1, 2, 3};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const auto p = softmax(x);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], std::exp(x[i]) / z, 1e-15);
  EXPECT_NEAR(p[0], 0.09003057, 1e-8);
  EXPECT_NEAR(p[1], 0.24472847, 1e-8);
  EXPECT_NEAR(p[2], 0.66524096, 1e-8);
}

TEST(Softmax, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(softmax(std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(softmax(std::vector<double>{1.0, std::nan("")}), std::invalid_argument);
  EXPECT_THROW(softmax(std::vector<double>{std::numeric_limits<double>::infinity()}),
               std::invalid_argument);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + rng.uniform_int(12));
    for (double& v : x) v = rng.normal(0.0, 5.0);
    const double c = rng.uniform(-50.0, 50.0);
    std::vector<double> shifted = x;
    for (double& v : shifted) v += c;
    const auto a = softmax(x);
    const auto b = softmax(shifted);
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      sum += a[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(LogSoftmax, AgreesWithLogOfSoftmax) {
  const std::vector<double> x = {0.5, -1.0, 3.0, 2.0};
  const auto lp = log_softmax(x);
  const auto p = softmax(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(lp[i], std::log(p[i]), 1e-14);
  EXPECT_NEAR(log_sum_exp(x), std::log(std::exp(0.5) + std::exp(-1.0) + std::exp(3.0) + std::exp(2.0)),
              1e-14);
}

TEST(TopK, TieBreaksByLowestIndex) {
  EXPECT_EQ(topk(std::vector<double>{0.1, 0.4, 0.4, 0.1}, 2).indices,
            (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(topk(std::vector<double>{5, 1, 9}, 1).indices, (std::vector<std::size_t>{2}));
  EXPECT_EQ(topk(std::vector<double>{0.3, 0.2, 0.25, 0.25}, 3).indices,
            (std::vector<std::size_t>{0, 2, 3}));
}

TEST(TopK, ValuesDescend) {
  const auto t = topk(std::vector<double>{2, 7, 1, 7, 3}, 4);
  EXPECT_EQ(t.indices, (std::vector<std::size_t>{1, 3, 4, 0}));
  EXPECT_EQ(t.values, (std::vector<double>{7, 7, 3, 2}));
}

TEST(TopK, RejectsOutOfRangeK) {
  const std::vector<double> v = {1, 2, 3};
  EXPECT_THROW(topk(v, 0), std::invalid_argument);
  EXPECT_THROW(topk(v, 4), std::invalid_argument);
}

TEST(TopK, PureUnderRepeatedCalls) {
  Rng rng(3);
  std::vector<double> v(40);
  for (double& x : v) x = static_cast<double>(rng.uniform_int(5));  // many ties
  const auto first = topk(v, 17);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(topk(v, 17).indices, first.indices);
}

TEST(Argmax, LowestIndexOnTies) {
  EXPECT_EQ(argmax(std::vector<double>{1, 3, 3, 2}), 1u);
}

TEST(Matrix, ValidatesDataLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), std::invalid_argument);
  Matrix m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(shape_string(m), "[2x3]");
}

TEST(Matrix, MatmulAgainstNaiveLoops) {
  Rng rng(5);
  const Matrix a = rng.normal_matrix(4, 3);
  const Matrix b = rng.normal_matrix(3, 5);
  const Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-14);
    }
  EXPECT_EQ(matmul_transposed(a, transpose(b)), c);
  EXPECT_THROW(matmul(a, a), std::invalid_argument);
}

TEST(Rng, ReproducibleStreams) {
  Rng a(123), b(123), c(124);
  bool any_diff = false;
  for (int i = 0; i < 10000; ++i) {
    const auto x = a.next_u64();
    ASSERT_EQ(x, b.next_u64());
    any_diff = any_diff || x != c.next_u64();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Rng, KnownSplitMix64Output) {
  // Reference values of SplitMix64 seeded with 0.
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(9);
  double s = 0.0, s2 = 0.0, lo = 1.0, hi = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Rng, UniformIntInRangeAndCategorical) {
  Rng rng(21);
  std::vector<int> counts(3, 0);
  const std::vector<double> probs = {0.2, 0.0, 0.8};
  for (int i = 0; i < 5000; ++i) {
    EXPECT_LT(rng.uniform_int(7), 7u);
    ++counts[rng.categorical(probs)];
  }
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[0] / 5000.0, 0.2, 0.03);
}

TEST(GradCheck, PolynomialIsExact) {
  const std::vector<double> x = {3.0};
  const std::vector<double> g = {6.0};
  const auto r = grad_check([](std::span<const double> p) { return p[0] * p[0]; }, g, x, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  Rng rng(7);
  std::vector<double> z(6);
  for (double& v : z) v = rng.normal();
  const std::size_t target = 2;
  auto f = [&](std::span<const double> p) { return -log_softmax(p)[target]; };
  auto g = softmax(z);
  g[target] -= 1.0;
  EXPECT_LT(grad_check(f, g, z, 1e-5).max_rel_error, 1e-6);
}

TEST(GradCheck, ReportsWrongGradient) {
  const std::vector<double> x = {3.0, 1.0};
  const std::vector<double> g = {6.6, 2.0};
  const auto r = grad_check(
      [](std::span<const double> p) { return p[0] * p[0] + p[1] * p[1]; }, g, x, 1e-5);
  EXPECT_NEAR(r.max_rel_error, 0.6 / 6.6, 1e-6);
  EXPECT_EQ(r.worst_index, 0u);
}

TEST(GradCheck, Errors) {
  const std::vector<double> x = {1.0};
  const std::vector<double> g = {1.0};
  auto f = [](std::span<const double> p) { return p[0]; };
  EXPECT_THROW(grad_check(f, g, x, 0.0), std::invalid_argument);
  EXPECT_THROW(grad_check(f, std::vector<double>{1.0, 2.0}, x, 1e-5), std::invalid_argument);
  EXPECT_THROW(grad_check([](std::span<const double> p) { return std::log(p[0] - 1.0); }, g, x,
                          1e-5),
               NumericError);
}

}  // namespace
}  // namespace ylab
