// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ylab/attention.hpp"
#include "ylab/numkit.hpp"

namespace ylab::attn {

/// Opaque snapshot of a KvCache at a token boundary.
struct KvCheckpoint {
  std::uint64_t cache_id = 0;
  std::size_t position = 0;
  std::vector<std::size_t> rows;          // per buffer
  std::vector<std::vector<double>> ring;  // sliding buffers only; empty otherwise
  std::vector<std::vector<std::size_t>> ring_positions;
};

/// Per-layer key/value storage for incremental decoding. Sliding-window
/// layers keep a ring buffer of the most recent W positions; full layers keep
/// every position. Layers that share a cache (see SharingMap) resolve to the
/// owner's buffer. Single writer: one decoding session owns a cache.
class KvCache {
 public:
  KvCache(const LayerPattern& pattern, std::size_t n_layers, std::size_t kv_dim);

  std::size_t n_layers() const noexcept { return buffer_of_layer_.size(); }
  std::size_t kv_dim() const noexcept { return kv_dim_; }
  std::size_t physical_buffers() const noexcept { return buffers_.size(); }
  const SharingMap& sharing() const noexcept { return sharing_; }

  /// Number of committed tokens; the next write lands at this position.
  std::size_t position() const noexcept { return position_; }

  /// Store K/V for the current position. Only cache-owning layers write,
  /// once per position.
  void write(std::size_t layer, std::span<const double> key, std::span<const double> value);

  /// Visible rows for `layer` at the current position, oldest first. Calls
  /// bump the layer's read counter by the number of rows returned.
  struct Rows {
    Matrix keys;
    Matrix values;
    std::vector<std::size_t> positions;
  };
  Rows read(std::size_t layer);

  /// Rows returned by the most recent read() of `layer`.
  std::size_t last_read_rows(std::size_t layer) const { return last_reads_.at(layer); }

  /// Commit the current position. Every owning layer must have written.
  void advance();

  KvCheckpoint checkpoint() const;
  /// Restore a checkpoint taken from this cache at or before the current position.
  void rollback(const KvCheckpoint& checkpoint);

  /// Rows physically resident across all buffers.
  std::uint64_t resident_rows() const noexcept;
  /// Byte walk: resident rows priced at the given layout's bytes per token.
  std::uint64_t resident_bytes(const CacheLayoutParams& params) const noexcept;

 private:
  struct Buffer {
    AttentionKind kind = AttentionKind::full;
    std::size_t capacity = 0;  // ring size for sliding layers
    std::size_t rows = 0;
    std::vector<double> keys;
    std::vector<double> values;
    std::vector<std::size_t> positions;
    std::size_t written_at = static_cast<std::size_t>(-1);
  };

  std::size_t slot(const Buffer& b, std::size_t pos) const noexcept {
    return b.kind == AttentionKind::sliding_window ? pos % b.capacity : pos;
  }

  std::uint64_t id_;
  std::size_t kv_dim_;
  SharingMap sharing_;
  std::vector<std::size_t> buffer_of_layer_;
  std::vector<Buffer> buffers_;
  std::vector<std::size_t> last_reads_;
  std::size_t position_ = 0;
};

}  // namespace ylab::attn
