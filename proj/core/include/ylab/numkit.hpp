// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ylab {

/// Raised when a computation produces or receives non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when stateful objects (caches, sessions) are driven out of order.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a[m×k] · b[k×n]
Matrix matmul(const Matrix& a, const Matrix& b);
/// a[m×k] · b[n×k]ᵀ
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// Numerically stable softmax (max-subtracted). Throws std::invalid_argument
/// on empty or non-finite input.
std::vector<double> softmax(std::span<const double> logits);
/// log(softmax(logits)) computed via log-sum-exp.
std::vector<double> log_softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> values);

struct TopK {
  std::vector<std::size_t> indices;
  std::vector<double> values;
};

/// k largest entries, sorted descending; ties go to the lower index.
TopK topk(std::span<const double> values, std::size_t k);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

/// SplitMix64 generator (Steele, Lea & Flood 2014). The output stream depends
/// only on the seed, so draws are identical on every platform and compiler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Uses rejection sampling, so it is unbiased.
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  /// Standard normal via Box-Muller; no cached second value.
  double normal() noexcept;
  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);

  /// Sample an index from a probability vector.
  std::size_t categorical(std::span<const double> probs) noexcept;

  std::uint64_t seed_state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> numeric;
};

using ScalarFn = std::function<double(std::span<const double>)>;

/// Compares `analytic` against central differences of `f` at `point`.
/// Relative error per coordinate is |a-n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const ScalarFn& f, std::span<const double> analytic,
                           std::span<const double> point, double step);

/// Elementwise relative error with the same floor as grad_check.
double relative_error(double a, double b) noexcept;

std::string shape_string(const Matrix& m);

}  // namespace ylab
