// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ylab/moe_router.hpp"

namespace ylab::dispatch {

struct Message {
  std::size_t source_rank = 0;
  std::size_t dest_group = 0;
  std::uint64_t tokens = 0;
  friend bool operator==(const Message&, const Message&) = default;
};

/// Routed-unit counts for one batch. Every (token, selected expert) pair is
/// one unit, so the per-expert counts sum to batch_size * top_k.
struct DispatchPlan {
  moe::ExpertTopology topology;
  std::size_t source_ranks = 1;
  std::vector<std::uint64_t> per_expert_tokens;
  std::vector<std::uint64_t> per_group_tokens;
  std::vector<std::uint64_t> per_partition_tokens;
  /// One entry per (source rank, destination group) with a non-zero count,
  /// ordered by rank then group.
  std::vector<Message> messages;

  std::uint64_t total_units() const noexcept;
  /// Units that leave their source rank's own group. Rank r is co-located
  /// with group r % n_groups.
  std::uint64_t remote_units() const noexcept;
  std::uint64_t communication_bytes(std::uint64_t bytes_per_token) const noexcept {
    return remote_units() * bytes_per_token;
  }
};

/// Tokens are assigned to source ranks round-robin (token t on rank t % R).
DispatchPlan dispatch(const moe::GateOutput& gate, const moe::ExpertTopology& topology,
                      std::size_t source_ranks);

enum class LoadScope { group, partition };

std::string to_string(LoadScope scope);

struct ImbalanceReport {
  LoadScope scope = LoadScope::group;
  std::uint64_t max_load = 0;
  double mean_load = 0.0;
  double stddev = 0.0;  // population standard deviation
  double imbalance_ratio = 1.0;  // max / mean, defined as 1 when mean is 0
};

ImbalanceReport imbalance(const DispatchPlan& plan, LoadScope scope);
ImbalanceReport imbalance(std::span<const std::uint64_t> loads, LoadScope scope);

struct RegimeVariant {
  std::string name;
  moe::LossCoefficients coeffs;
};

struct RegimeResult {
  std::string variant;
  ImbalanceReport group;
  ImbalanceReport partition;
  moe::TrajectoryPoint final_point;
};

struct RegimeConfig {
  moe::GateTrainConfig train;
  std::size_t held_out_tokens = 4096;
  std::size_t source_ranks = 4;
  /// Worker threads; results are ordered by variant index regardless.
  std::size_t jobs = 1;
};

/// Trains one gate per variant (shared seed), dispatches a held-out seeded
/// batch through each and reports the resulting imbalance.
std::vector<RegimeResult> compare_regimes(const moe::ExpertTopology& topology,
                                          std::span<const RegimeVariant> variants,
                                          const RegimeConfig& config);

/// The three standard variants: paper coefficients, ST only, all zero.
std::vector<RegimeVariant> standard_variants();

}  // namespace ylab::dispatch
