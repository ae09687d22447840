// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ylab/attention.hpp"
#include "ylab/kv_cache.hpp"
#include "ylab/numkit.hpp"

namespace ylab::attn {

struct ToyModelConfig {
  std::size_t vocab = 32;
  std::size_t dim = 16;
  std::size_t n_layers = 4;
  LayerPattern pattern = LayerPattern::parse("3:1", 4, false);
  double rope_base = 10000.0;
  double init_scale = 0.5;
  std::uint64_t seed = 42;
};

/// Randomly initialised attention-only transformer: token embedding, a stack
/// of single-head attention layers with residual connections (no FFN, no
/// normalisation) and a readout tied to the embedding, scaled by 1/sqrt(dim).
/// Layers that read a shared cache have no K/V projections of their own and
/// attend over the keys/values produced by their owner layer.
class ToyTransformer {
 public:
  explicit ToyTransformer(const ToyModelConfig& config);

  const ToyModelConfig& config() const noexcept { return config_; }
  const SharingMap& sharing() const noexcept { return sharing_; }
  std::size_t vocab() const noexcept { return config_.vocab; }

  /// Whole-sequence forward pass; returns logits [tokens x vocab]. Positions
  /// default to 0..n-1. `extra_mask`, when given, is ANDed with each layer's
  /// own causal or sliding-window mask.
  Matrix forward(std::span<const int> tokens) const;
  Matrix forward(std::span<const int> tokens, std::span<const std::size_t> positions,
                 const AttentionMask* extra_mask) const;

  KvCache make_cache() const;

  /// Incremental decode of one token at cache.position(); returns its logits.
  std::vector<double> decode_step(KvCache& cache, int token) const;

  /// Throws std::invalid_argument when a token is outside the vocabulary.
  void check_tokens(std::span<const int> tokens) const;

 private:
  struct Layer {
    Matrix wq, wk, wv, wo;  // [dim x dim]; wk/wv empty for shared readers
  };

  AttentionMask layer_mask(std::size_t layer, std::size_t n) const;
  /// Tied readout, scaled by 1/sqrt(dim).
  Matrix readout(const Matrix& h) const;
  RopeConfig rope() const { return RopeConfig{config_.rope_base, config_.dim}; }

  ToyModelConfig config_;
  SharingMap sharing_;
  Matrix embedding_;  // [vocab x dim]
  std::vector<Layer> layers_;
};

}  // namespace ylab::attn
