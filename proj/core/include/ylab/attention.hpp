// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ylab/numkit.hpp"

namespace ylab::attn {

enum class AttentionKind : std::uint8_t { sliding_window, full };

/// Repeating layer pattern. Layer l has kind kinds[l % kinds.size()]; a
/// trailing partial tile is allowed.
struct LayerPattern {
  std::vector<AttentionKind> kinds;
  std::size_t window = 4096;
  bool share_full_kv = false;

  /// "3:1" is three sliding layers then one full layer; "0:1" is all full.
  /// A literal string of 'S'/'F' characters ("SSSF") is also accepted.
  static LayerPattern parse(std::string_view spec, std::size_t window, bool share_full_kv);

  void validate() const;
  AttentionKind kind_at(std::size_t layer) const { return kinds[layer % kinds.size()]; }
  /// Canonical "S:F" form when the pattern is sliding-then-full, else the letters.
  std::string name() const;
};

/// owner[l] is the layer whose K/V layer l attends over. Consecutive full
/// layers pair left to right; an odd trailing full layer owns its cache.
struct SharingMap {
  std::vector<std::size_t> owner;

  bool owns_cache(std::size_t layer) const noexcept { return owner[layer] == layer; }
  std::size_t physical_buffers() const noexcept;
};

SharingMap sharing_map(const LayerPattern& pattern, std::size_t n_layers);

struct CacheLayoutParams {
  std::uint64_t context_len = 65536;
  std::size_t n_heads = 8;
  std::size_t head_dim = 128;
  std::size_t bytes_per_element = 2;
};

struct CacheLayout {
  std::size_t n_layers = 0;
  std::uint64_t context_len = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  std::size_t bytes_per_element = 0;
  /// Tokens resident for each layer's own cache (0 for layers reading a shared cache).
  std::vector<std::uint64_t> per_layer_cached_tokens;
  std::uint64_t cached_tokens = 0;
  std::uint64_t total_bytes = 0;
  /// All layers full attention, no sharing.
  std::uint64_t baseline_bytes = 0;
  /// 1 - total / baseline
  double reduction = 0.0;
};

std::uint64_t kv_bytes_per_token(const CacheLayoutParams& params) noexcept;

CacheLayout memory_account(const LayerPattern& pattern, std::size_t n_layers,
                           const CacheLayoutParams& params);

struct RopeConfig {
  double base = 10000.0;
  std::size_t head_dim = 0;
  void validate() const;
};

/// Rotation angle of every (2j, 2j+1) pair at `position`: position * base^(-2j/d).
std::vector<double> rope_angles(std::size_t position, const RopeConfig& config);

Matrix rope_apply(const Matrix& vectors, std::span<const std::size_t> positions,
                  const RopeConfig& config);
/// In-place rotation of a single row.
void rope_apply_row(std::span<double> row, std::size_t position, const RopeConfig& config);

/// Dense boolean mask; allowed(t, s) means query t may attend key s.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  static AttentionMask causal(std::size_t n);
  /// Causal band: t attends s when t - window < s <= t.
  static AttentionMask sliding(std::size_t n, std::size_t window);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool allowed(std::size_t t, std::size_t s) const noexcept { return bits_[t * cols_ + s] != 0; }
  void set(std::size_t t, std::size_t s, bool v) noexcept { bits_[t * cols_ + s] = v ? 1 : 0; }

  /// Elementwise AND; shapes must match.
  AttentionMask operator&(const AttentionMask& other) const;
  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// softmax(QK^T / sqrt(d) + mask) V. Rows with no permitted key produce zeros.
Matrix attend_masked(const Matrix& q, const Matrix& k, const Matrix& v,
                     const AttentionMask& mask);
Matrix attend_full(const Matrix& q, const Matrix& k, const Matrix& v, bool causal);
/// With causal set, token t attends max(0, t-W+1)..t; otherwise |t-s| < W.
Matrix attend_sliding(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t window,
                      bool causal);

}  // namespace ylab::attn
