// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/toy_model.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace ylab::attn {

ToyTransformer::ToyTransformer(const ToyModelConfig& config)
    : config_(config), sharing_(sharing_map(config.pattern, config.n_layers)) {
  if (config.vocab < 2) throw std::invalid_argument("ToyTransformer: vocab must be >= 2");
  if (config.n_layers < 1) throw std::invalid_argument("ToyTransformer: n_layers must be >= 1");
  rope().validate();

  Rng rng(config.seed);
  embedding_ = rng.normal_matrix(config.vocab, config.dim, 1.0);
  const double w_scale = config.init_scale / std::sqrt(static_cast<double>(config.dim));
  layers_.reserve(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Layer layer;
    layer.wq = rng.normal_matrix(config.dim, config.dim, w_scale);
    if (sharing_.owns_cache(l)) {
      layer.wk = rng.normal_matrix(config.dim, config.dim, w_scale);
      layer.wv = rng.normal_matrix(config.dim, config.dim, w_scale);
    }
    layer.wo = rng.normal_matrix(config.dim, config.dim, w_scale);
    layers_.push_back(std::move(layer));
  }
}

void ToyTransformer::check_tokens(std::span<const int> tokens) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config_.vocab) {
      throw std::invalid_argument("token " + std::to_string(tokens[i]) + " at index " +
                                  std::to_string(i) + " is outside vocabulary of size " +
                                  std::to_string(config_.vocab));
    }
  }
}

AttentionMask ToyTransformer::layer_mask(std::size_t layer, std::size_t n) const {
  return config_.pattern.kind_at(layer) == AttentionKind::sliding_window
             ? AttentionMask::sliding(n, config_.pattern.window)
             : AttentionMask::causal(n);
}

Matrix ToyTransformer::forward(std::span<const int> tokens) const {
  std::vector<std::size_t> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  return forward(tokens, positions, nullptr);
}

Matrix ToyTransformer::forward(std::span<const int> tokens,
                               std::span<const std::size_t> positions,
                               const AttentionMask* extra_mask) const {
  check_tokens(tokens);
  const std::size_t n = tokens.size();
  if (positions.size() != n) {
    throw std::invalid_argument("forward: positions length does not match tokens");
  }
  if (extra_mask && (extra_mask->rows() != n || extra_mask->cols() != n)) {
    throw std::invalid_argument("forward: extra mask shape does not match sequence");
  }
  const auto rcfg = rope();
  Matrix h(n, config_.dim);
  for (std::size_t t = 0; t < n; ++t) {
    auto src = embedding_.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), h.row(t).begin());
  }

  std::vector<Matrix> keys(config_.n_layers);
  std::vector<Matrix> values(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const Layer& layer = layers_[l];
    const Matrix q = rope_apply(matmul(h, layer.wq), positions, rcfg);
    if (sharing_.owns_cache(l)) {
      keys[l] = rope_apply(matmul(h, layer.wk), positions, rcfg);
      values[l] = matmul(h, layer.wv);
    }
    const std::size_t src = sharing_.owner[l];
    AttentionMask mask = layer_mask(l, n);
    if (extra_mask) mask = mask & *extra_mask;
    const Matrix attended = matmul(attend_masked(q, keys[src], values[src], mask), layer.wo);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attended.data()[i];
  }
  return readout(h);
}

Matrix ToyTransformer::readout(const Matrix& h) const {
  Matrix logits = matmul_transposed(h, embedding_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.dim));
  for (double& v : logits.data()) v *= scale;
  return logits;
}

KvCache ToyTransformer::make_cache() const {
  return KvCache(config_.pattern, config_.n_layers, config_.dim);
}

std::vector<double> ToyTransformer::decode_step(KvCache& cache, int token) const {
  const int one[] = {token};
  check_tokens(one);
  if (cache.n_layers() != config_.n_layers || cache.kv_dim() != config_.dim) {
    throw StateError("decode_step: cache shape does not match model");
  }
  const auto rcfg = rope();
  const std::size_t pos = cache.position();
  Matrix x(1, config_.dim);
  {
    auto src = embedding_.row(static_cast<std::size_t>(token));
    std::copy(src.begin(), src.end(), x.row(0).begin());
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const Layer& layer = layers_[l];
    Matrix q = matmul(x, layer.wq);
    rope_apply_row(q.row(0), pos, rcfg);
    if (sharing_.owns_cache(l)) {
      Matrix k = matmul(x, layer.wk);
      rope_apply_row(k.row(0), pos, rcfg);
      const Matrix v = matmul(x, layer.wv);
      cache.write(l, k.row(0), v.row(0));
    }
    const auto rows = cache.read(l);
    const AttentionMask all(1, rows.keys.rows(), true);
    const Matrix attended = matmul(attend_masked(q, rows.keys, rows.values, all), layer.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += attended.data()[i];
  }
  cache.advance();
  const Matrix logits = readout(x);
  return {logits.data().begin(), logits.data().end()};
}

}  // namespace ylab::attn
