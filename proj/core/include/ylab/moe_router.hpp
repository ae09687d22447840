// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ylab/numkit.hpp"

namespace ylab::moe {

enum class Scope { global, group, partition };

std::string_view to_string(Scope scope) noexcept;

/// Expert layout. Experts are numbered so that group g owns the contiguous
/// range [g*N^g, (g+1)*N^g) and each group is split into contiguous
/// partitions of N^p experts.
struct ExpertTopology {
  std::size_t n_experts = 1;             // N
  std::size_t n_groups = 1;
  std::size_t experts_per_group = 1;     // N^g
  std::size_t partitions_per_group = 1;
  std::size_t experts_per_partition = 1; // N^p
  std::size_t top_k = 1;

  static ExpertTopology make(std::size_t n_groups, std::size_t partitions_per_group,
                             std::size_t experts_per_partition, std::size_t top_k);

  /// Throws std::invalid_argument when the counts are inconsistent.
  void validate() const;

  std::size_t n_partitions() const noexcept { return n_groups * partitions_per_group; }
  std::size_t group_of(std::size_t expert) const noexcept { return expert / experts_per_group; }
  std::size_t partition_of(std::size_t expert) const noexcept {
    return expert / experts_per_partition;
  }

  /// Number of scope units (1, n_groups or n_partitions).
  std::size_t scope_units(Scope scope) const noexcept;
  /// Experts per scope unit (N, N^g or N^p).
  std::size_t scope_width(Scope scope) const noexcept;
  std::size_t scope_unit_of(Scope scope, std::size_t expert) const noexcept;
  std::size_t first_expert(Scope scope, std::size_t unit) const noexcept {
    return unit * scope_width(scope);
  }
};

/// Routing output for a batch. Probabilities are not renormalised after
/// top-k selection; selection only drives dispatch.
struct GateOutput {
  Matrix probs;                                // [tokens x N]
  std::vector<std::vector<std::size_t>> selected;  // top-k per token, descending
  std::size_t top_k = 1;

  std::size_t batch_size() const noexcept { return probs.rows(); }
  std::size_t n_experts() const noexcept { return probs.cols(); }
  /// Highest-probability expert (ties to the lowest index).
  std::size_t argmax(std::size_t token) const noexcept { return selected[token].front(); }
};

/// Linear gate: probs = softmax(embeddings · weights) per token.
GateOutput gate(const Matrix& embeddings, const Matrix& weights, std::size_t top_k);
GateOutput gate_from_logits(const Matrix& logits, std::size_t top_k);
/// Wraps precomputed probability rows; each row must sum to 1 within 1e-9.
GateOutput gate_from_probs(Matrix probs, std::size_t top_k);

struct BalanceStats {
  Scope scope = Scope::global;
  std::size_t scope_index = 0;
  std::vector<double> token_fraction;  // f over the scope's experts
  std::vector<double> mean_prob;       // P over the scope's experts
  std::size_t scope_token_count = 0;   // |B|, |B^g| or |B^p|
};

/// f and P for one scope unit. A token belongs to a group or partition when
/// its argmax expert lies inside it. An empty restricted batch yields zero
/// vectors and scope_token_count = 0.
BalanceStats balance_stats(const GateOutput& gate, const ExpertTopology& topology, Scope scope,
                           std::size_t scope_index);
std::vector<BalanceStats> balance_stats_all(const GateOutput& gate,
                                            const ExpertTopology& topology, Scope scope);

double loss_st(const BalanceStats& stats, double alpha);
double loss_ep(std::span<const BalanceStats> stats, double alpha);
double loss_pep(std::span<const BalanceStats> stats, double alpha);

struct LossCoefficients {
  double alpha_st = 1e-6;
  double alpha_ep = 1e-4;
  double alpha_pep = 1e-3;

  void validate() const;
  friend bool operator==(const LossCoefficients&, const LossCoefficients&) = default;
};

struct AuxLoss {
  double total = 0.0;
  double st = 0.0;
  double ep = 0.0;
  double pep = 0.0;
  /// d total / d logits, [tokens x N]. f is held constant.
  Matrix grad_logits;
};

AuxLoss combined_aux_loss(const GateOutput& gate, const ExpertTopology& topology,
                          const LossCoefficients& coeffs);

// ---------------------------------------------------------------------------
// Fine-grained segmentation

struct ExpertFfnConfig {
  std::size_t n_experts = 8;
  std::size_t hidden = 1024;
  std::size_t top_k = 2;
  std::size_t model_dim = 512;
};

struct SegmentedConfig {
  std::size_t base_experts = 0;
  std::size_t base_hidden = 0;
  std::size_t base_top_k = 0;
  std::size_t segment_factor = 1;
  std::size_t seg_experts = 0;
  std::size_t seg_hidden = 0;
  std::size_t seg_top_k = 0;
  std::size_t model_dim = 0;

  std::uint64_t total_params_before = 0;
  std::uint64_t total_params_after = 0;
  std::uint64_t activated_params_before = 0;
  std::uint64_t activated_params_after = 0;
};

/// Parameters in `n_experts` two-matrix FFNs (d×h up, h×d down).
std::uint64_t ffn_params(std::size_t n_experts, std::size_t hidden, std::size_t model_dim);

/// Splits every expert into m narrower experts and multiplies top-k by m.
SegmentedConfig segment(const ExpertFfnConfig& base, std::size_t m);

// ---------------------------------------------------------------------------
// Gate training

/// Seeded stream of token embeddings. Column 0 is a constant 1 so the
/// matching gate-weight row acts as a per-expert bias; the remaining columns
/// are standard normal.
class TokenSource {
 public:
  TokenSource(std::size_t dim, std::uint64_t seed);
  Matrix next(std::size_t tokens);
  std::size_t dim() const noexcept { return dim_; }

 private:
  std::size_t dim_;
  Rng rng_;
};

enum class GateInit {
  uniform,      // expert i reads feature i+1; balanced in expectation
  adversarial,  // uniform plus a large bias on expert 0
  random,       // i.i.d. normal weights
};

GateInit parse_gate_init(std::string_view name);
std::string_view to_string(GateInit init) noexcept;

struct GateTrainConfig {
  std::size_t dim = 16;
  std::size_t tokens_per_step = 512;
  std::size_t steps = 2000;
  double lr = 100.0;
  GateInit init = GateInit::adversarial;
  double feature_scale = 1.0;
  double adversarial_bias = 6.0;
  std::uint64_t seed = 42;
};

Matrix init_gate_weights(const GateTrainConfig& config, std::size_t n_experts);

struct TrajectoryPoint {
  std::size_t step = 0;
  double loss = 0.0;
  double max_f = 0.0;
  double min_f = 0.0;
  friend bool operator==(const TrajectoryPoint&, const TrajectoryPoint&) = default;
};

struct GateTrainResult {
  std::vector<TrajectoryPoint> trajectory;
  Matrix weights;
};

/// Plain gradient descent on the gate weights using the combined auxiliary
/// loss. Throws NumericError naming the step on a non-finite loss.
GateTrainResult train_gate(const ExpertTopology& topology, const LossCoefficients& coeffs,
                           const GateTrainConfig& config);

}  // namespace ylab::moe
