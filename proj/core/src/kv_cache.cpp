// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/kv_cache.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <string>

namespace ylab::attn {

namespace {
std::atomic<std::uint64_t> next_cache_id{1};
}

KvCache::KvCache(const LayerPattern& pattern, std::size_t n_layers, std::size_t kv_dim)
    : id_(next_cache_id.fetch_add(1)), kv_dim_(kv_dim), sharing_(sharing_map(pattern, n_layers)) {
  if (n_layers == 0) throw std::invalid_argument("KvCache: n_layers must be >= 1");
  if (kv_dim == 0) throw std::invalid_argument("KvCache: kv_dim must be >= 1");
  buffer_of_layer_.resize(n_layers);
  last_reads_.assign(n_layers, 0);
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (!sharing_.owns_cache(l)) {
      buffer_of_layer_[l] = buffer_of_layer_[sharing_.owner[l]];
      continue;
    }
    Buffer b;
    b.kind = pattern.kind_at(l);
    if (b.kind == AttentionKind::sliding_window) {
      b.capacity = pattern.window;
      b.keys.assign(b.capacity * kv_dim_, 0.0);
      b.values.assign(b.capacity * kv_dim_, 0.0);
      b.positions.assign(b.capacity, 0);
    }
    buffer_of_layer_[l] = buffers_.size();
    buffers_.push_back(std::move(b));
  }
}

void KvCache::write(std::size_t layer, std::span<const double> key,
                    std::span<const double> value) {
  if (layer >= n_layers()) throw std::out_of_range("KvCache::write: layer out of range");
  if (!sharing_.owns_cache(layer)) {
    throw StateError("KvCache::write: layer " + std::to_string(layer) +
                     " reads the cache of layer " + std::to_string(sharing_.owner[layer]) +
                     " and cannot write");
  }
  if (key.size() != kv_dim_ || value.size() != kv_dim_) {
    throw std::invalid_argument("KvCache::write: row width does not match kv_dim");
  }
  Buffer& b = buffers_[buffer_of_layer_[layer]];
  if (b.written_at == position_) {
    throw StateError("KvCache::write: layer " + std::to_string(layer) +
                     " already wrote position " + std::to_string(position_));
  }
  if (b.kind == AttentionKind::sliding_window) {
    const std::size_t s = slot(b, position_);
    std::copy(key.begin(), key.end(), b.keys.begin() + static_cast<std::ptrdiff_t>(s * kv_dim_));
    std::copy(value.begin(), value.end(),
              b.values.begin() + static_cast<std::ptrdiff_t>(s * kv_dim_));
    b.positions[s] = position_;
    b.rows = std::min(b.rows + 1, b.capacity);
  } else {
    b.keys.insert(b.keys.end(), key.begin(), key.end());
    b.values.insert(b.values.end(), value.begin(), value.end());
    b.positions.push_back(position_);
    ++b.rows;
  }
  b.written_at = position_;
}

KvCache::Rows KvCache::read(std::size_t layer) {
  if (layer >= n_layers()) throw std::out_of_range("KvCache::read: layer out of range");
  const Buffer& b = buffers_[buffer_of_layer_[layer]];
  if (b.written_at != position_) {
    throw StateError("KvCache::read: layer " + std::to_string(layer) +
                     " has no entry for position " + std::to_string(position_));
  }
  std::vector<std::size_t> slots(b.rows);
  if (b.kind == AttentionKind::sliding_window) {
    // Oldest resident position first.
    const std::size_t oldest = position_ + 1 - b.rows;
    for (std::size_t i = 0; i < b.rows; ++i) slots[i] = slot(b, oldest + i);
  } else {
    std::iota(slots.begin(), slots.end(), std::size_t{0});
  }
  Rows out{Matrix(b.rows, kv_dim_), Matrix(b.rows, kv_dim_), {}};
  out.positions.reserve(b.rows);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto off = static_cast<std::ptrdiff_t>(slots[i] * kv_dim_);
    std::copy_n(b.keys.begin() + off, kv_dim_, out.keys.row(i).begin());
    std::copy_n(b.values.begin() + off, kv_dim_, out.values.row(i).begin());
    out.positions.push_back(b.positions[slots[i]]);
  }
  last_reads_[layer] = b.rows;
  return out;
}

void KvCache::advance() {
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    if (buffers_[i].written_at != position_) {
      throw StateError("KvCache::advance: buffer " + std::to_string(i) +
                       " was not written at position " + std::to_string(position_));
    }
  }
  ++position_;
}

KvCheckpoint KvCache::checkpoint() const {
  KvCheckpoint cp;
  cp.cache_id = id_;
  cp.position = position_;
  cp.rows.reserve(buffers_.size());
  cp.ring.resize(buffers_.size());
  cp.ring_positions.resize(buffers_.size());
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    const Buffer& b = buffers_[i];
    cp.rows.push_back(b.rows);
    if (b.kind == AttentionKind::sliding_window) {
      cp.ring[i] = b.keys;
      cp.ring[i].insert(cp.ring[i].end(), b.values.begin(), b.values.end());
      cp.ring_positions[i] = b.positions;
    }
  }
  return cp;
}

void KvCache::rollback(const KvCheckpoint& cp) {
  if (cp.cache_id != id_) throw StateError("KvCache::rollback: checkpoint is from another cache");
  if (cp.position > position_) {
    throw StateError("KvCache::rollback: checkpoint position " + std::to_string(cp.position) +
                     " is ahead of the cache (" + std::to_string(position_) + ")");
  }
  if (cp.rows.size() != buffers_.size()) throw StateError("KvCache::rollback: corrupt checkpoint");
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    Buffer& b = buffers_[i];
    b.rows = cp.rows[i];
    if (b.kind == AttentionKind::sliding_window) {
      const std::size_t half = b.capacity * kv_dim_;
      if (cp.ring[i].size() != 2 * half) throw StateError("KvCache::rollback: corrupt checkpoint");
      std::copy_n(cp.ring[i].begin(), half, b.keys.begin());
      std::copy_n(cp.ring[i].begin() + static_cast<std::ptrdiff_t>(half), half, b.values.begin());
      b.positions = cp.ring_positions[i];
    } else {
      b.keys.resize(b.rows * kv_dim_);
      b.values.resize(b.rows * kv_dim_);
      b.positions.resize(b.rows);
    }
    b.written_at = cp.position == 0 ? static_cast<std::size_t>(-1) : cp.position - 1;
  }
  position_ = cp.position;
}

std::uint64_t KvCache::resident_rows() const noexcept {
  std::uint64_t total = 0;
  for (const auto& b : buffers_) total += b.rows;
  return total;
}

std::uint64_t KvCache::resident_bytes(const CacheLayoutParams& params) const noexcept {
  return resident_rows() * kv_bytes_per_token(params);
}

}  // namespace ylab::attn
