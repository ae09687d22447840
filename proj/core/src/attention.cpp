// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/attention.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ylab::attn {

namespace {

std::size_t parse_count(std::string_view text, std::string_view whole) {
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw std::invalid_argument("layer pattern '" + std::string(whole) +
                                "': expected <sliding>:<full> counts");
  }
  return value;
}

}  // namespace

LayerPattern LayerPattern::parse(std::string_view spec, std::size_t window, bool share_full_kv) {
  LayerPattern p;
  p.window = window;
  p.share_full_kv = share_full_kv;
  if (const auto colon = spec.find(':'); colon != std::string_view::npos) {
    const std::size_t n_sliding = parse_count(spec.substr(0, colon), spec);
    const std::size_t n_full = parse_count(spec.substr(colon + 1), spec);
    p.kinds.insert(p.kinds.end(), n_sliding, AttentionKind::sliding_window);
    p.kinds.insert(p.kinds.end(), n_full, AttentionKind::full);
  } else if (spec == "full") {
    p.kinds = {AttentionKind::full};
  } else {
    for (char c : spec) {
      if (c == 'S' || c == 's') {
        p.kinds.push_back(AttentionKind::sliding_window);
      } else if (c == 'F' || c == 'f') {
        p.kinds.push_back(AttentionKind::full);
      } else {
        throw std::invalid_argument("layer pattern '" + std::string(spec) +
                                    "': unexpected character '" + std::string(1, c) + "'");
      }
    }
  }
  p.validate();
  return p;
}

void LayerPattern::validate() const {
  if (kinds.empty()) throw std::invalid_argument("LayerPattern: pattern must have >= 1 layer");
  if (window < 1) throw std::invalid_argument("LayerPattern: window must be >= 1");
}

std::string LayerPattern::name() const {
  const auto first_full = std::find(kinds.begin(), kinds.end(), AttentionKind::full);
  const bool canonical = std::all_of(first_full, kinds.end(),
                                     [](AttentionKind k) { return k == AttentionKind::full; });
  if (canonical) {
    const auto n_sliding = static_cast<std::size_t>(first_full - kinds.begin());
    return std::to_string(n_sliding) + ":" + std::to_string(kinds.size() - n_sliding);
  }
  std::string out;
  for (auto k : kinds) out.push_back(k == AttentionKind::full ? 'F' : 'S');
  return out;
}

std::size_t SharingMap::physical_buffers() const noexcept {
  std::size_t n = 0;
  for (std::size_t l = 0; l < owner.size(); ++l) n += owns_cache(l) ? 1 : 0;
  return n;
}

SharingMap sharing_map(const LayerPattern& pattern, std::size_t n_layers) {
  pattern.validate();
  SharingMap map;
  map.owner.resize(n_layers);
  std::size_t pending_full = n_layers;  // sentinel: no unpaired full layer
  for (std::size_t l = 0; l < n_layers; ++l) {
    map.owner[l] = l;
    if (!pattern.share_full_kv || pattern.kind_at(l) != AttentionKind::full) continue;
    if (pending_full == n_layers) {
      pending_full = l;
    } else {
      map.owner[l] = pending_full;
      pending_full = n_layers;
    }
  }
  return map;
}

std::uint64_t kv_bytes_per_token(const CacheLayoutParams& params) noexcept {
  return 2u * static_cast<std::uint64_t>(params.n_heads) * params.head_dim *
         params.bytes_per_element;
}

CacheLayout memory_account(const LayerPattern& pattern, std::size_t n_layers,
                           const CacheLayoutParams& params) {
  pattern.validate();
  if (n_layers == 0) throw std::invalid_argument("memory_account: n_layers must be >= 1");
  if (params.n_heads == 0 || params.head_dim == 0 || params.bytes_per_element == 0) {
    throw std::invalid_argument("memory_account: heads, head_dim and element size must be >= 1");
  }
  const auto sharing = sharing_map(pattern, n_layers);

  CacheLayout layout;
  layout.n_layers = n_layers;
  layout.context_len = params.context_len;
  layout.n_heads = params.n_heads;
  layout.head_dim = params.head_dim;
  layout.bytes_per_element = params.bytes_per_element;
  layout.per_layer_cached_tokens.resize(n_layers, 0);
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (!sharing.owns_cache(l)) continue;
    layout.per_layer_cached_tokens[l] =
        pattern.kind_at(l) == AttentionKind::sliding_window
            ? std::min<std::uint64_t>(pattern.window, params.context_len)
            : params.context_len;
    layout.cached_tokens += layout.per_layer_cached_tokens[l];
  }
  const std::uint64_t per_token = kv_bytes_per_token(params);
  layout.total_bytes = layout.cached_tokens * per_token;
  layout.baseline_bytes = static_cast<std::uint64_t>(n_layers) * params.context_len * per_token;
  layout.reduction =
      layout.baseline_bytes == 0
          ? 0.0
          : 1.0 - static_cast<double>(layout.total_bytes) /
                      static_cast<double>(layout.baseline_bytes);
  return layout;
}

void RopeConfig::validate() const {
  if (!(base > 0.0) || !std::isfinite(base)) {
    throw std::invalid_argument("RopeConfig: base must be positive");
  }
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw std::invalid_argument("RopeConfig: head_dim must be even, got " +
                                std::to_string(head_dim));
  }
}

std::vector<double> rope_angles(std::size_t position, const RopeConfig& config) {
  config.validate();
  std::vector<double> angles(config.head_dim / 2);
  const double d = static_cast<double>(config.head_dim);
  for (std::size_t j = 0; j < angles.size(); ++j) {
    const double freq = std::pow(config.base, -2.0 * static_cast<double>(j) / d);
    angles[j] = static_cast<double>(position) * freq;
  }
  return angles;
}

void rope_apply_row(std::span<double> row, std::size_t position, const RopeConfig& config) {
  if (row.size() != config.head_dim) {
    throw std::invalid_argument("rope_apply: row width " + std::to_string(row.size()) +
                                " != head_dim " + std::to_string(config.head_dim));
  }
  const auto angles = rope_angles(position, config);
  for (std::size_t j = 0; j < angles.size(); ++j) {
    const double c = std::cos(angles[j]);
    const double s = std::sin(angles[j]);
    const double x0 = row[2 * j];
    const double x1 = row[2 * j + 1];
    row[2 * j] = x0 * c - x1 * s;
    row[2 * j + 1] = x0 * s + x1 * c;
  }
}

Matrix rope_apply(const Matrix& vectors, std::span<const std::size_t> positions,
                  const RopeConfig& config) {
  config.validate();
  if (positions.size() != vectors.rows()) {
    throw std::invalid_argument("rope_apply: " + std::to_string(positions.size()) +
                                " positions for " + std::to_string(vectors.rows()) + " rows");
  }
  Matrix out = vectors;
  for (std::size_t r = 0; r < out.rows(); ++r) rope_apply_row(out.row(r), positions[r], config);
  return out;
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n, n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s <= t; ++s) m.set(t, s, true);
  return m;
}

AttentionMask AttentionMask::sliding(std::size_t n, std::size_t window) {
  if (window < 1) throw std::invalid_argument("AttentionMask::sliding: window must be >= 1");
  AttentionMask m(n, n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t lo = t + 1 > window ? t + 1 - window : 0;
    for (std::size_t s = lo; s <= t; ++s) m.set(t, s, true);
  }
  return m;
}

AttentionMask AttentionMask::operator&(const AttentionMask& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) {
    throw std::invalid_argument("AttentionMask: shape mismatch in &");
  }
  AttentionMask out(rows_, cols_);
  for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] = bits_[i] & other.bits_[i];
  return out;
}

Matrix attend_masked(const Matrix& q, const Matrix& k, const Matrix& v,
                     const AttentionMask& mask) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw std::invalid_argument("attend: shape mismatch q" + shape_string(q) + " k" +
                                shape_string(k) + " v" + shape_string(v));
  }
  if (mask.rows() != q.rows() || mask.cols() != k.rows()) {
    throw std::invalid_argument("attend: mask shape does not match q/k");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix out(q.rows(), v.cols());
  std::vector<double> scores(k.rows());
  for (std::size_t t = 0; t < q.rows(); ++t) {
    auto qt = q.row(t);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < k.rows(); ++s) {
      if (!mask.allowed(t, s)) continue;
      auto ks = k.row(s);
      double dot = 0.0;
      for (std::size_t j = 0; j < q.cols(); ++j) dot += qt[j] * ks[j];
      scores[s] = dot * scale;
      best = std::max(best, scores[s]);
    }
    if (best == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (std::size_t s = 0; s < k.rows(); ++s) {
      if (!mask.allowed(t, s)) continue;
      scores[s] = std::exp(scores[s] - best);
      total += scores[s];
    }
    auto ot = out.row(t);
    for (std::size_t s = 0; s < k.rows(); ++s) {
      if (!mask.allowed(t, s)) continue;
      const double w = scores[s] / total;
      auto vs = v.row(s);
      for (std::size_t j = 0; j < v.cols(); ++j) ot[j] += w * vs[j];
    }
  }
  return out;
}

Matrix attend_full(const Matrix& q, const Matrix& k, const Matrix& v, bool causal) {
  if (causal && q.rows() != k.rows()) {
    throw std::invalid_argument("attend_full: causal attention needs equal query/key lengths");
  }
  return attend_masked(q, k, v,
                       causal ? AttentionMask::causal(q.rows())
                              : AttentionMask(q.rows(), k.rows(), true));
}

Matrix attend_sliding(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t window,
                      bool causal) {
  if (window < 1) throw std::invalid_argument("attend_sliding: window must be >= 1");
  if (q.rows() != k.rows()) {
    throw std::invalid_argument("attend_sliding: query/key lengths differ");
  }
  if (causal) return attend_masked(q, k, v, AttentionMask::sliding(q.rows(), window));
  AttentionMask band(q.rows(), k.rows());
  for (std::size_t t = 0; t < q.rows(); ++t)
    for (std::size_t s = 0; s < k.rows(); ++s)
      band.set(t, s, (t > s ? t - s : s - t) < window);
  return attend_masked(q, k, v, band);
}

}  // namespace ylab::attn
