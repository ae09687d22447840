// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/packing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ylab::pack {

Fraction Fraction::make(std::int64_t num, std::int64_t den) {
  if (den <= 0) throw std::invalid_argument("Fraction: denominator must be positive");
  const std::int64_t g = std::gcd(num, den);
  return g == 0 ? Fraction{0, 1} : Fraction{num / g, den / g};
}

Fraction Fraction::operator+(const Fraction& o) const {
  const std::int64_t l = std::lcm(den, o.den);
  return make(num * (l / den) + o.num * (l / o.den), l);
}

PackPolicy parse_policy(std::string_view name) {
  if (name == "first_fit") return PackPolicy::first_fit;
  if (name == "greedy_descending") return PackPolicy::greedy_descending;
  throw std::invalid_argument("unknown packing policy '" + std::string(name) +
                              "' (expected first_fit or greedy_descending)");
}

std::string_view to_string(PackPolicy policy) noexcept {
  return policy == PackPolicy::first_fit ? "first_fit" : "greedy_descending";
}

std::size_t PackedBatch::total_tokens() const noexcept {
  std::size_t n = 0;
  for (const auto& seq : spans)
    for (const auto& s : seq) n += s.length;
  return n;
}

double PackedBatch::utilization() const noexcept {
  if (sequences.empty() || capacity == 0) return 0.0;
  return static_cast<double>(total_tokens()) /
         static_cast<double>(sequences.size() * capacity);
}

std::vector<std::size_t> PackedBatch::position_ids(std::size_t sequence) const {
  std::vector<std::size_t> ids(capacity, 0);
  for (const auto& s : spans.at(sequence))
    for (std::size_t i = 0; i < s.length; ++i) ids[s.start + i] = i;
  return ids;
}

namespace {

void check_spans(std::span<const SampleSpan> spans, std::size_t capacity) {
  std::vector<std::uint8_t> used(capacity, 0);
  for (const auto& s : spans) {
    if (s.length < 1) {
      throw std::invalid_argument("span for sample " + std::to_string(s.sample_id) +
                                  " has zero length");
    }
    if (s.start + s.length > capacity) {
      throw std::invalid_argument("span for sample " + std::to_string(s.sample_id) +
                                  " exceeds capacity " + std::to_string(capacity));
    }
    for (std::size_t i = s.start; i < s.start + s.length; ++i) {
      if (used[i]) {
        throw std::invalid_argument("span for sample " + std::to_string(s.sample_id) +
                                    " overlaps another span at position " + std::to_string(i));
      }
      used[i] = 1;
    }
  }
}

}  // namespace

attn::AttentionMask bca_mask(std::span<const SampleSpan> spans, std::size_t capacity) {
  check_spans(spans, capacity);
  attn::AttentionMask mask(capacity, capacity);
  for (const auto& s : spans) {
    for (std::size_t t = s.start; t < s.start + s.length; ++t)
      for (std::size_t u = s.start; u <= t; ++u) mask.set(t, u, true);
  }
  return mask;
}

std::vector<Fraction> reweight(std::span<const SampleSpan> spans, std::size_t capacity,
                               std::size_t batch_sample_count) {
  check_spans(spans, capacity);
  if (batch_sample_count < 1) throw std::invalid_argument("reweight: empty batch");
  std::vector<Fraction> weights(capacity);
  for (const auto& s : spans) {
    if (s.loss_token_count < 1) {
      throw std::invalid_argument("reweight: sample " + std::to_string(s.sample_id) +
                                  " has no loss tokens");
    }
    if (s.loss_token_count > s.length) {
      throw std::invalid_argument("reweight: sample " + std::to_string(s.sample_id) +
                                  " has more loss tokens than tokens");
    }
    const auto w = Fraction::make(
        1, static_cast<std::int64_t>(batch_sample_count) *
               static_cast<std::int64_t>(s.loss_token_count));
    for (std::size_t i = s.start + s.length - s.loss_token_count; i < s.start + s.length; ++i) {
      weights[i] = w;
    }
  }
  return weights;
}

PackedBatch pack(std::span<const std::vector<int>> samples, std::size_t capacity,
                 PackPolicy policy) {
  if (capacity < 1) throw std::invalid_argument("pack: capacity must be >= 1");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() > capacity) {
      throw std::invalid_argument("pack: sample " + std::to_string(i) + " has " +
                                  std::to_string(samples[i].size()) +
                                  " tokens, exceeding capacity " + std::to_string(capacity));
    }
    if (samples[i].size() < 2) {
      throw std::invalid_argument("pack: sample " + std::to_string(i) +
                                  " needs at least 2 tokens to carry a loss token");
    }
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (policy == PackPolicy::greedy_descending) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return samples[a].size() > samples[b].size();
    });
  }

  PackedBatch batch;
  batch.capacity = capacity;
  batch.sample_count = samples.size();
  std::vector<std::size_t> used;
  for (std::size_t id : order) {
    const std::size_t len = samples[id].size();
    std::size_t seq = 0;
    while (seq < used.size() && capacity - used[seq] < len) ++seq;
    if (seq == used.size()) {
      used.push_back(0);
      batch.sequences.emplace_back(capacity, kPadToken);
      batch.spans.emplace_back();
    }
    std::copy(samples[id].begin(), samples[id].end(),
              batch.sequences[seq].begin() + static_cast<std::ptrdiff_t>(used[seq]));
    batch.spans[seq].push_back({id, used[seq], len, len - 1});
    used[seq] += len;
  }

  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    batch.masks.push_back(bca_mask(batch.spans[s], capacity));
    batch.token_weights.push_back(reweight(batch.spans[s], capacity, batch.sample_count));
  }
  return batch;
}

namespace {

// Mean next-token cross-entropy over the span's loss tokens.
double span_loss(const Matrix& logits, std::span<const int> tokens, const SampleSpan& s) {
  double total = 0.0;
  for (std::size_t i = s.start + s.length - s.loss_token_count; i < s.start + s.length; ++i) {
    const auto lp = log_softmax(logits.row(i - 1));
    total -= lp[static_cast<std::size_t>(tokens[i])];
  }
  return total / static_cast<double>(s.loss_token_count);
}

}  // namespace

PackedLossCheck packed_loss_check(const attn::ToyTransformer& model,
                                  std::span<const std::vector<int>> samples,
                                  std::size_t capacity, bool block_causal, PackPolicy policy) {
  const PackedBatch batch = pack(samples, capacity, policy);
  PackedLossCheck out;
  out.packed.assign(samples.size(), 0.0);
  out.isolated.assign(samples.size(), 0.0);

  for (std::size_t q = 0; q < batch.sequences.size(); ++q) {
    const auto& seq = batch.sequences[q];
    Matrix logits;
    if (block_causal) {
      const auto positions = batch.position_ids(q);
      logits = model.forward(seq, positions, &batch.masks[q]);
    } else {
      logits = model.forward(seq);
    }
    for (const auto& s : batch.spans[q]) out.packed[s.sample_id] = span_loss(logits, seq, s);
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto logits = model.forward(samples[i]);
    const SampleSpan alone{i, 0, samples[i].size(), samples[i].size() - 1};
    out.isolated[i] = span_loss(logits, samples[i], alone);
    out.max_abs_diff = std::max(out.max_abs_diff, std::fabs(out.packed[i] - out.isolated[i]));
  }
  return out;
}

}  // namespace ylab::pack
