// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/packing.hpp"

#include <gtest/gtest.h>

#include <numeric>

namespace ylab::pack {
namespace {

std::vector<std::vector<int>> samples_of_lengths(const std::vector<std::size_t>& lengths,
                                                 std::uint64_t seed = 1, int vocab = 32) {
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t len : lengths) {
    std::vector<int> s(len);
    for (auto& t : s) t = 1 + static_cast<int>(rng.uniform_int(vocab - 1));
    out.push_back(std::move(s));
  }
  return out;
}

// Independent BCA constructor: embed a causal block per span into zeros.
attn::AttentionMask embedded_causal_blocks(const std::vector<SampleSpan>& spans, std::size_t cap) {
  attn::AttentionMask m(cap, cap, false);
  for (const auto& sp : spans) {
    const auto block = attn::AttentionMask::causal(sp.length);
    for (std::size_t i = 0; i < sp.length; ++i)
      for (std::size_t j = 0; j < sp.length; ++j)
        if (block.allowed(i, j)) m.set(sp.start + i, sp.start + j, true);
  }
  return m;
}

TEST(Fraction, ReducesAndAdds) {
  EXPECT_EQ(Fraction::make(2, 4), (Fraction{1, 2}));
  EXPECT_EQ(Fraction::make(1, 6) + Fraction::make(1, 3), (Fraction{1, 2}));
  EXPECT_EQ(Fraction::make(0, 7), (Fraction{0, 1}));
  EXPECT_THROW(Fraction::make(1, 0), std::invalid_argument);
}

TEST(Pack, TwoSmallSamplesShareOneSequence) {
  const auto b = pack(samples_of_lengths({3, 2}), 8, PackPolicy::first_fit);
  ASSERT_EQ(b.sequences.size(), 1u);
  EXPECT_EQ(b.spans[0], (std::vector<SampleSpan>{{0, 0, 3, 2}, {1, 3, 2, 1}}));
  const auto& seq = b.sequences[0];
  EXPECT_EQ(std::count(seq.begin() + 5, seq.end(), kPadToken), 3);
  EXPECT_EQ(b.total_tokens(), 5u);
  EXPECT_DOUBLE_EQ(b.utilization(), 5.0 / 8.0);
  EXPECT_EQ(b.position_ids(0), (std::vector<std::size_t>{0, 1, 2, 0, 1, 0, 0, 0}));
}

TEST(Pack, PigeonholeForcesSeparateSequences) {
  const auto b = pack(samples_of_lengths({5, 5, 5}), 8, PackPolicy::first_fit);
  EXPECT_EQ(b.sequences.size(), 3u);
}

TEST(Pack, FirstFitVersusGreedyDescending) {
  const auto samples = samples_of_lengths({2, 6, 3, 5});
  const auto ff = pack(samples, 8, PackPolicy::first_fit);
  // first_fit: [2,6] [3,5]
  ASSERT_EQ(ff.sequences.size(), 2u);
  EXPECT_EQ(ff.spans[0][1].sample_id, 1u);
  const auto gd = pack(samples, 8, PackPolicy::greedy_descending);
  // descending 6,5,3,2: [6,2] [5,3]
  ASSERT_EQ(gd.sequences.size(), 2u);
  EXPECT_EQ(gd.spans[0][0].sample_id, 1u);
  EXPECT_EQ(gd.spans[0][1].sample_id, 0u);
  EXPECT_EQ(parse_policy("greedy_descending"), PackPolicy::greedy_descending);
  EXPECT_THROW(parse_policy("best_fit"), std::invalid_argument);
}

TEST(Pack, Errors) {
  EXPECT_THROW(pack(samples_of_lengths({3, 9}), 8, PackPolicy::first_fit), std::invalid_argument);
  EXPECT_THROW(pack(samples_of_lengths({1}), 8, PackPolicy::first_fit), std::invalid_argument);
  try {
    pack(samples_of_lengths({3, 9}), 8, PackPolicy::first_fit);
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
}

TEST(Pack, RandomConservationAndDisjointness) {
  Rng rng(50);
  for (PackPolicy policy : {PackPolicy::first_fit, PackPolicy::greedy_descending}) {
    std::vector<std::size_t> lengths(50);
    for (auto& l : lengths) l = 2 + rng.uniform_int(511);
    const auto samples = samples_of_lengths(lengths, 9);
    const auto b = pack(samples, 512, policy);
    const std::size_t input = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
    std::size_t spanned = 0;
    std::vector<int> seen(samples.size(), 0);
    for (std::size_t s = 0; s < b.sequences.size(); ++s) {
      std::vector<int> cover(512, 0);
      for (const auto& sp : b.spans[s]) {
        spanned += sp.length;
        ++seen[sp.sample_id];
        for (std::size_t i = 0; i < sp.length; ++i) {
          ++cover[sp.start + i];
          EXPECT_EQ(b.sequences[s][sp.start + i], samples[sp.sample_id][i]);
        }
      }
      for (int c : cover) EXPECT_LE(c, 1);
    }
    EXPECT_EQ(spanned, input);
    EXPECT_EQ(b.total_tokens(), input);
    for (int c : seen) EXPECT_EQ(c, 1);
  }
}

TEST(Pack, DeterministicForPolicy) {
  const auto samples = samples_of_lengths({7, 3, 9, 2, 4, 4, 11}, 3);
  const auto a = pack(samples, 16, PackPolicy::greedy_descending);
  const auto b = pack(samples, 16, PackPolicy::greedy_descending);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_EQ(a.spans, b.spans);
}

TEST(BcaMask, SingleFullSpanIsCausal) {
  const std::vector<SampleSpan> spans = {{0, 0, 6, 5}};
  EXPECT_EQ(bca_mask(spans, 6), attn::AttentionMask::causal(6));
}

TEST(BcaMask, IsolationExample) {
  const std::vector<SampleSpan> spans = {{0, 0, 3, 2}, {1, 3, 2, 1}};
  const auto m = bca_mask(spans, 8);
  for (std::size_t s = 0; s < 8; ++s) EXPECT_EQ(m.allowed(3, s), s == 3);
  for (std::size_t s = 0; s < 8; ++s) EXPECT_EQ(m.allowed(4, s), s == 3 || s == 4);
  for (std::size_t t = 5; t < 8; ++t)
    for (std::size_t s = 0; s < 8; ++s) {
      EXPECT_FALSE(m.allowed(t, s));
      EXPECT_FALSE(m.allowed(s, t));
    }
}

TEST(BcaMask, RandomSpansMatchIndependentConstructorAndIsolate) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t cap = 8 + rng.uniform_int(57);
    std::vector<SampleSpan> spans;
    std::vector<int> owner(cap, -1);
    std::size_t pos = rng.uniform_int(3);
    while (pos < cap) {
      const std::size_t len = 1 + rng.uniform_int(std::min<std::size_t>(10, cap - pos));
      spans.push_back({spans.size(), pos, len, len});
      for (std::size_t i = 0; i < len; ++i) owner[pos + i] = static_cast<int>(spans.size() - 1);
      pos += len + rng.uniform_int(3);
    }
    const auto m = bca_mask(spans, cap);
    EXPECT_EQ(m, embedded_causal_blocks(spans, cap));
    for (std::size_t t = 0; t < cap; ++t)
      for (std::size_t s = 0; s < cap; ++s)
        if (owner[t] != owner[s] || owner[t] < 0) {
          EXPECT_FALSE(m.allowed(t, s));
        }
  }
}

TEST(BcaMask, RejectsBadSpans) {
  const std::vector<SampleSpan> overlap = {{0, 0, 4, 3}, {1, 3, 2, 1}};
  EXPECT_THROW(bca_mask(overlap, 8), std::invalid_argument);
  const std::vector<SampleSpan> beyond = {{0, 6, 4, 3}};
  EXPECT_THROW(bca_mask(beyond, 8), std::invalid_argument);
  const std::vector<SampleSpan> empty = {{0, 0, 0, 0}};
  EXPECT_THROW(bca_mask(empty, 8), std::invalid_argument);
}

TEST(Reweight, TwoSamplesOfDifferentLength) {
  // Every token is a loss token here.
  const std::vector<SampleSpan> spans = {{0, 0, 10, 10}, {1, 10, 2, 2}};
  const auto w = reweight(spans, 12, 2);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(w[i], Fraction::make(1, 20));
  EXPECT_EQ(w[10], Fraction::make(1, 4));
  EXPECT_EQ(w[11], Fraction::make(1, 4));
  Fraction a, b;
  for (std::size_t i = 0; i < 10; ++i) a = a + w[i];
  for (std::size_t i = 10; i < 12; ++i) b = b + w[i];
  EXPECT_EQ(a, Fraction::make(1, 2));
  EXPECT_EQ(b, Fraction::make(1, 2));
}

TEST(Reweight, SingleSampleAndEqualLengths) {
  const std::vector<SampleSpan> one = {{0, 0, 5, 5}};
  for (const auto& f : reweight(one, 5, 1)) EXPECT_EQ(f, Fraction::make(1, 5));
  const std::vector<SampleSpan> equal = {{0, 0, 4, 4}, {1, 4, 4, 4}};
  for (const auto& f : reweight(equal, 8, 2)) EXPECT_EQ(f, Fraction::make(1, 8));
}

TEST(Reweight, OnlyLossTokensCarryWeight) {
  const std::vector<SampleSpan> spans = {{0, 1, 4, 3}};
  const auto w = reweight(spans, 6, 1);
  EXPECT_EQ(w[0], Fraction{});
  EXPECT_EQ(w[1], Fraction{});
  for (std::size_t i = 2; i < 5; ++i) EXPECT_EQ(w[i], Fraction::make(1, 3));
  EXPECT_EQ(w[5], Fraction{});
  const std::vector<SampleSpan> none = {{0, 0, 4, 0}};
  EXPECT_THROW(reweight(none, 4, 1), std::invalid_argument);
}

TEST(Reweight, BatchWeightsAreExactlyNormalized) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> lengths(1 + rng.uniform_int(12));
    for (auto& l : lengths) l = 2 + rng.uniform_int(30);
    const auto b = pack(samples_of_lengths(lengths, trial), 40, PackPolicy::first_fit);
    const auto n = static_cast<std::int64_t>(lengths.size());
    Fraction total;
    for (std::size_t s = 0; s < b.sequences.size(); ++s) {
      for (const auto& sp : b.spans[s]) {
        Fraction per_sample;
        for (std::size_t i = 0; i < sp.length; ++i)
          per_sample = per_sample + b.token_weights[s][sp.start + i];
        EXPECT_EQ(per_sample, Fraction::make(1, n));
      }
      for (const auto& f : b.token_weights[s]) total = total + f;
      for (std::size_t i = 0; i < b.capacity; ++i) {
        bool in_span = false;
        for (const auto& sp : b.spans[s]) in_span |= i >= sp.start && i < sp.start + sp.length;
        if (!in_span) {
          EXPECT_EQ(b.token_weights[s][i], Fraction{});
        }
      }
    }
    EXPECT_EQ(total, Fraction::make(1, 1));
  }
}

TEST(Reweight, DoublingASampleKeepsItsShare) {
  auto samples = samples_of_lengths({6, 9, 4}, 2);
  const auto before = pack(samples, 64, PackPolicy::first_fit);
  samples[1].insert(samples[1].end(), samples[1].begin(), samples[1].end());
  const auto after = pack(samples, 64, PackPolicy::first_fit);
  auto share_of = [](const PackedBatch& b, std::size_t id) {
    Fraction f;
    for (std::size_t s = 0; s < b.sequences.size(); ++s)
      for (const auto& sp : b.spans[s])
        if (sp.sample_id == id)
          for (std::size_t i = 0; i < sp.length; ++i) f = f + b.token_weights[s][sp.start + i];
    return f;
  };
  EXPECT_EQ(share_of(before, 1), Fraction::make(1, 3));
  EXPECT_EQ(share_of(after, 1), Fraction::make(1, 3));
}

attn::ToyTransformer small_model() {
  attn::ToyModelConfig cfg;
  cfg.n_layers = 8;
  cfg.pattern = attn::LayerPattern::parse("3:1", 4, true);
  return attn::ToyTransformer(cfg);
}

TEST(PackedLoss, BcaMatchesIsolatedRuns) {
  const auto model = small_model();
  const auto samples = samples_of_lengths({7, 11}, 21);
  const auto r = packed_loss_check(model, samples, 24);
  ASSERT_EQ(r.packed.size(), 2u);
  EXPECT_LT(r.max_abs_diff, 1e-9);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(r.packed[i], r.isolated[i], 1e-9);
}

TEST(PackedLoss, PlainCausalLeaksIntoLaterSample) {
  const auto model = small_model();
  const auto samples = samples_of_lengths({7, 11}, 21);
  const auto r = packed_loss_check(model, samples, 24, false);
  EXPECT_NEAR(r.packed[0], r.isolated[0], 1e-9);
  EXPECT_GT(std::abs(r.packed[1] - r.isolated[1]), 1e-6);
}

TEST(PackedLoss, OneSamplePerSequenceIsTrivial) {
  const auto model = small_model();
  const auto samples = samples_of_lengths({9, 9, 9}, 4);
  for (bool bca : {true, false}) {
    const auto r = packed_loss_check(model, samples, 10, bca);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.packed[i], r.isolated[i], 1e-12);
  }
}

}  // namespace
}  // namespace ylab::pack
