// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ylab/attention.hpp"
#include "ylab/toy_model.hpp"

namespace ylab::pack {

/// Exact non-negative rational, always reduced.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction make(std::int64_t num, std::int64_t den);
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  Fraction operator+(const Fraction& o) const;
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

/// A sample's placement inside one packed sequence. The loss tokens are the
/// last `loss_token_count` positions of the span.
struct SampleSpan {
  std::size_t sample_id = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t loss_token_count = 0;
  friend bool operator==(const SampleSpan&, const SampleSpan&) = default;
};

enum class PackPolicy { first_fit, greedy_descending };

PackPolicy parse_policy(std::string_view name);
std::string_view to_string(PackPolicy policy) noexcept;

inline constexpr int kPadToken = 0;

struct PackedBatch {
  std::size_t capacity = 0;
  std::size_t sample_count = 0;
  std::vector<std::vector<int>> sequences;        // each padded to capacity
  std::vector<std::vector<SampleSpan>> spans;     // per sequence, ordered by start
  std::vector<attn::AttentionMask> masks;         // block-causal, per sequence
  std::vector<std::vector<Fraction>> token_weights;  // per sequence, per position

  std::size_t total_tokens() const noexcept;
  /// Non-padding tokens / (sequences * capacity).
  double utilization() const noexcept;
  /// Positions restart at 0 at the start of every span; padding gets 0.
  std::vector<std::size_t> position_ids(std::size_t sequence) const;
};

/// Packs samples (no truncation) into sequences of `capacity` tokens.
/// Every sample gets loss tokens = length - 1 (next-token prediction).
/// Throws std::invalid_argument naming an oversized or too-short sample.
PackedBatch pack(std::span<const std::vector<int>> samples, std::size_t capacity,
                 PackPolicy policy);

/// Block-diagonal causal mask; padding rows and columns are fully masked.
attn::AttentionMask bca_mask(std::span<const SampleSpan> spans, std::size_t capacity);

/// Per-position weights for one sequence: each loss token of sample j gets
/// 1 / (batch_sample_count * loss_token_count_j); everything else 0.
std::vector<Fraction> reweight(std::span<const SampleSpan> spans, std::size_t capacity,
                               std::size_t batch_sample_count);

struct PackedLossCheck {
  std::vector<double> packed;    // indexed by sample id
  std::vector<double> isolated;  // indexed by sample id
  double max_abs_diff = 0.0;
};

/// Mean next-token cross-entropy per sample, computed inside packed sequences
/// and for each sample alone. With `block_causal` false the packed run uses
/// a plain causal mask over the whole sequence with running positions.
PackedLossCheck packed_loss_check(const attn::ToyTransformer& model,
                                  std::span<const std::vector<int>> samples,
                                  std::size_t capacity, bool block_causal = true,
                                  PackPolicy policy = PackPolicy::first_fit);

}  // namespace ylab::pack
