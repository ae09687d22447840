// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/moe_router.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ylab::moe {
namespace {

BalanceStats make_stats(Scope scope, std::size_t index, std::vector<double> f,
                        std::vector<double> p, std::size_t count = 1) {
  BalanceStats s;
  s.scope = scope;
  s.scope_index = index;
  s.token_fraction = std::move(f);
  s.mean_prob = std::move(p);
  s.scope_token_count = count;
  return s;
}

BalanceStats uniform_stats(Scope scope, std::size_t index, std::size_t width) {
  const std::vector<double> u(width, 1.0 / static_cast<double>(width));
  return make_stats(scope, index, u, u);
}

Matrix random_logits(std::size_t tokens, std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return rng.normal_matrix(tokens, n, scale);
}

TEST(Topology, Validation) {
  const auto t = ExpertTopology::make(2, 2, 2, 1);
  EXPECT_EQ(t.n_experts, 8u);
  EXPECT_EQ(t.experts_per_group, 4u);
  EXPECT_EQ(t.n_partitions(), 4u);
  EXPECT_EQ(t.group_of(5), 1u);
  EXPECT_EQ(t.partition_of(5), 2u);
  EXPECT_EQ(t.scope_width(Scope::global), 8u);
  EXPECT_EQ(t.scope_width(Scope::group), 4u);
  EXPECT_EQ(t.scope_width(Scope::partition), 2u);
  EXPECT_THROW(ExpertTopology::make(0, 1, 1, 1), std::invalid_argument);
  EXPECT_THROW(ExpertTopology::make(2, 2, 2, 9), std::invalid_argument);
  ExpertTopology bad = t;
  bad.experts_per_group = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Gate, ZeroWeightsGiveUniformAndLowestIndex) {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(5, 3);
  const auto g = gate(x, Matrix(3, 4), 1);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.probs(t, i), 0.25);
    EXPECT_EQ(g.selected[t], (std::vector<std::size_t>{0}));
  }
}

TEST(Gate, ForcedLogits) {
  const auto g = gate_from_logits(Matrix(1, 4, std::vector<double>{10, 0, 0, 0}), 1);
  const double expected = 1.0 / (1.0 + 3.0 * std::exp(-10.0));
  EXPECT_NEAR(g.probs(0, 0), expected, 1e-15);
  EXPECT_NEAR(g.probs(0, 0), 0.99986, 1e-5);
  EXPECT_EQ(g.selected[0].front(), 0u);
}

TEST(Gate, TopKMatchesSortOracle) {
  const Matrix z = random_logits(32, 8, 77);
  const auto g = gate_from_logits(z, 2);
  for (std::size_t t = 0; t < 32; ++t) {
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return z(t, a) > z(t, b); });
    EXPECT_EQ(g.selected[t], (std::vector<std::size_t>{idx[0], idx[1]}));
  }
}

TEST(Gate, ShapeErrors) {
  EXPECT_THROW(gate(Matrix(2, 3), Matrix(4, 2), 1), std::invalid_argument);
  EXPECT_THROW(gate_from_probs(Matrix(1, 2, std::vector<double>{0.5, 0.6}), 1),
               std::invalid_argument);
}

TEST(BalanceStats, EvenArgmaxAndCollapse) {
  const auto topo = ExpertTopology::make(1, 1, 4, 1);
  Matrix logits(8, 4);
  for (std::size_t t = 0; t < 8; ++t) logits(t, t % 4) = 3.0;
  auto s = balance_stats(gate_from_logits(logits, 1), topo, Scope::global, 0);
  for (double f : s.token_fraction) EXPECT_DOUBLE_EQ(f, 0.25);
  EXPECT_EQ(s.scope_token_count, 8u);

  Matrix collapsed(8, 4);
  for (std::size_t t = 0; t < 8; ++t) collapsed(t, 0) = 3.0;
  s = balance_stats(gate_from_logits(collapsed, 1), topo, Scope::global, 0);
  EXPECT_EQ(s.token_fraction, (std::vector<double>{1, 0, 0, 0}));
}

TEST(BalanceStats, MatchesTokenByTokenTally) {
  const auto topo = ExpertTopology::make(2, 1, 4, 1);
  const auto g = gate_from_logits(random_logits(64, 8, 5, 2.0), 1);
  for (std::size_t grp = 0; grp < 2; ++grp) {
    std::vector<double> f(4, 0.0), p(4, 0.0);
    double count = 0.0;
    for (std::size_t t = 0; t < 64; ++t) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < 8; ++i)
        if (g.probs(t, i) > g.probs(t, best)) best = i;
      if (best / 4 != grp) continue;
      count += 1.0;
      f[best % 4] += 1.0;
      for (std::size_t i = 0; i < 4; ++i) p[i] += g.probs(t, grp * 4 + i);
    }
    const auto s = balance_stats(g, topo, Scope::group, grp);
    ASSERT_GT(count, 0.0);
    EXPECT_EQ(s.scope_token_count, static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(s.token_fraction[i], f[i] / count, 1e-15);
      EXPECT_NEAR(s.mean_prob[i], p[i] / count, 1e-15);
    }
  }
}

TEST(BalanceStats, EmptyScopeIsZero) {
  const auto topo = ExpertTopology::make(2, 1, 2, 1);
  Matrix logits(4, 4);
  for (std::size_t t = 0; t < 4; ++t) logits(t, 0) = 5.0;
  const auto s = balance_stats(gate_from_logits(logits, 1), topo, Scope::group, 1);
  EXPECT_EQ(s.scope_token_count, 0u);
  EXPECT_EQ(s.token_fraction, (std::vector<double>{0, 0}));
  EXPECT_EQ(s.mean_prob, (std::vector<double>{0, 0}));
  const std::vector<BalanceStats> v = {s};
  EXPECT_EQ(loss_ep(v, 1.0), 0.0);
  EXPECT_THROW(balance_stats(gate_from_logits(logits, 1), topo, Scope::group, 2),
               std::invalid_argument);
}

TEST(LossSt, UniformAndCollapse) {
  EXPECT_DOUBLE_EQ(loss_st(uniform_stats(Scope::global, 0, 4), 1.0), 1.0);
  EXPECT_DOUBLE_EQ(
      loss_st(make_stats(Scope::global, 0, {1, 0, 0, 0}, {1, 0, 0, 0}), 1.0), 4.0);
  EXPECT_THROW(loss_st(uniform_stats(Scope::group, 0, 4), 1.0), std::invalid_argument);
}

TEST(LossSt, ScaleConsistencyForEveryWidth) {
  for (std::size_t n = 1; n <= 64; ++n) {
    EXPECT_NEAR(loss_st(uniform_stats(Scope::global, 0, n), 0.37), 0.37, 1e-15) << n;
  }
}

TEST(LossSt, RandomBatchMatchesDirectFormula) {
  const auto topo = ExpertTopology::make(1, 1, 8, 1);
  const Matrix z = random_logits(50, 8, 13);
  const auto g = gate_from_logits(z, 1);
  std::vector<double> f(8, 0.0), p(8, 0.0);
  for (std::size_t t = 0; t < 50; ++t) {
    const auto row = softmax(z.row(t));
    f[argmax(row)] += 1.0 / 50.0;
    for (std::size_t i = 0; i < 8; ++i) p[i] += row[i] / 50.0;
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < 8; ++i) dot += f[i] * p[i];
  EXPECT_NEAR(loss_st(balance_stats(g, topo, Scope::global, 0), 0.5), 0.5 * 8 * dot, 1e-14);
}

TEST(LossEp, UniformGroupsAndCollapse) {
  std::vector<BalanceStats> groups = {uniform_stats(Scope::group, 0, 4),
                                      uniform_stats(Scope::group, 1, 4),
                                      uniform_stats(Scope::group, 2, 4)};
  EXPECT_NEAR(loss_ep(groups, 0.1), 0.3, 1e-15);
  groups[1] = make_stats(Scope::group, 1, {0, 0, 1, 0}, {0, 0, 1, 0});
  EXPECT_NEAR(loss_ep(groups, 0.1), 0.1 * (4 + 2), 1e-14);
  groups[2].scope = Scope::partition;
  EXPECT_THROW(loss_ep(groups, 0.1), std::invalid_argument);
}

TEST(LossEp, RealGateInternallyUniformGroups) {
  // Each token keeps its mass inside one group and favours a different
  // expert there, so f and P are both uniform over the group.
  const auto topo = ExpertTopology::make(2, 1, 4, 1);
  const double e = 0.01;
  Matrix probs(8, 8);
  for (std::size_t t = 0; t < 8; ++t) {
    const std::size_t grp = t / 4, fav = t % 4;
    for (std::size_t i = 0; i < 4; ++i) probs(t, grp * 4 + i) = i == fav ? 0.25 + 3 * e : 0.25 - e;
  }
  const auto stats = balance_stats_all(gate_from_probs(probs, 1), topo, Scope::group);
  EXPECT_NEAR(loss_ep(stats, 0.1), 0.1 * 2, 1e-15);
}

TEST(LossPep, UniformAndSingleExpertPartitions) {
  std::vector<BalanceStats> parts;
  for (std::size_t i = 0; i < 4; ++i) parts.push_back(uniform_stats(Scope::partition, i, 2));
  EXPECT_NEAR(loss_pep(parts, 1e-3), 4e-3, 1e-18);

  const auto topo = ExpertTopology::make(2, 2, 1, 1);
  const auto g = gate_from_logits(random_logits(40, 4, 3), 1);
  const auto stats = balance_stats_all(g, topo, Scope::partition);
  for (const auto& s : stats) {
    if (s.scope_token_count == 0) continue;
    EXPECT_DOUBLE_EQ(s.token_fraction[0], 1.0);
    const std::vector<BalanceStats> one = {s};
    EXPECT_NEAR(loss_pep(one, 2.0), 2.0 * s.mean_prob[0], 1e-15);
  }
}

TEST(LossPep, RandomBatchMatchesTally) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  const Matrix z = random_logits(80, 8, 19, 1.5);
  const auto g = gate_from_logits(z, 1);
  double expected = 0.0;
  for (std::size_t part = 0; part < 4; ++part) {
    std::vector<double> f(2, 0.0), p(2, 0.0);
    double count = 0.0;
    for (std::size_t t = 0; t < 80; ++t) {
      const auto row = softmax(z.row(t));
      const std::size_t best = argmax(row);
      if (best / 2 != part) continue;
      count += 1.0;
      f[best % 2] += 1.0;
      for (std::size_t i = 0; i < 2; ++i) p[i] += row[part * 2 + i];
    }
    if (count == 0.0) continue;
    expected += 1e-3 * 2.0 * (f[0] * p[0] + f[1] * p[1]) / (count * count);
  }
  EXPECT_NEAR(loss_pep(balance_stats_all(g, topo, Scope::partition), 1e-3), expected, 1e-16);
}

TEST(CombinedAux, UniformMinimaSum) {
  // A gate cannot be uniform at all three scopes at once, so the minima are
  // summed from per-scope uniform stats.
  const LossCoefficients c;
  const double st = loss_st(uniform_stats(Scope::global, 0, 8), c.alpha_st);
  std::vector<BalanceStats> groups = {uniform_stats(Scope::group, 0, 4),
                                      uniform_stats(Scope::group, 1, 4)};
  std::vector<BalanceStats> parts;
  for (std::size_t i = 0; i < 4; ++i) parts.push_back(uniform_stats(Scope::partition, i, 2));
  const double total = st + loss_ep(groups, c.alpha_ep) + loss_pep(parts, c.alpha_pep);
  EXPECT_NEAR(total, 1e-6 + 2e-4 + 4e-3, 1e-18);
}

TEST(CombinedAux, DefaultCoefficients) {
  const LossCoefficients c;
  EXPECT_EQ(c.alpha_st, 1e-6);
  EXPECT_EQ(c.alpha_ep, 1e-4);
  EXPECT_EQ(c.alpha_pep, 1e-3);
  EXPECT_THROW((LossCoefficients{-1.0, 0, 0}).validate(), std::invalid_argument);
}

TEST(CombinedAux, ZeroCoefficientsGiveZero) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  const auto out = combined_aux_loss(gate_from_logits(random_logits(20, 8, 4), 1), topo,
                                     LossCoefficients{0, 0, 0});
  EXPECT_EQ(out.total, 0.0);
  for (double v : out.grad_logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(CombinedAux, SumOfScopeLosses) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  const LossCoefficients c{0.3, 0.2, 0.1};
  const auto g = gate_from_logits(random_logits(30, 8, 8), 1);
  const auto out = combined_aux_loss(g, topo, c);
  EXPECT_NEAR(out.st, loss_st(balance_stats(g, topo, Scope::global, 0), 0.3), 1e-15);
  EXPECT_NEAR(out.ep, loss_ep(balance_stats_all(g, topo, Scope::group), 0.2), 1e-15);
  EXPECT_NEAR(out.pep, loss_pep(balance_stats_all(g, topo, Scope::partition), 0.1), 1e-15);
  EXPECT_NEAR(out.total, out.st + out.ep + out.pep, 1e-15);
}

// Independent f-frozen surrogate: membership and f come from the base
// logits; P is recomputed from the perturbed logits.
double frozen_surrogate(const Matrix& base, std::span<const double> flat,
                        const ExpertTopology& topo, const LossCoefficients& c) {
  const std::size_t tokens = base.rows(), n = base.cols();
  std::vector<std::size_t> top(tokens);
  std::vector<std::vector<double>> probs(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    top[t] = argmax(softmax(base.row(t)));
    probs[t] = softmax(flat.subspan(t * n, n));
  }
  double total = 0.0;
  const std::pair<Scope, double> scopes[] = {
      {Scope::global, c.alpha_st}, {Scope::group, c.alpha_ep}, {Scope::partition, c.alpha_pep}};
  for (auto [scope, alpha] : scopes) {
    const std::size_t width = topo.scope_width(scope);
    for (std::size_t u = 0; u < topo.scope_units(scope); ++u) {
      std::vector<double> f(width, 0.0), p(width, 0.0);
      double count = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) {
        if (top[t] / width != u) continue;
        count += 1.0;
        f[top[t] % width] += 1.0;
        for (std::size_t i = 0; i < width; ++i) p[i] += probs[t][u * width + i];
      }
      if (count == 0.0) continue;
      double dot = 0.0;
      for (std::size_t i = 0; i < width; ++i) dot += f[i] * p[i];
      total += alpha * static_cast<double>(width) * dot / (count * count);
    }
  }
  return total;
}

TEST(CombinedAux, GradientMatchesFiniteDifferences) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  const LossCoefficients c{0.5, 0.7, 1.1};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix z = random_logits(12, 8, 1000 + seed);
    const auto out = combined_aux_loss(gate_from_logits(z, 1), topo, c);
    EXPECT_NEAR(out.total, frozen_surrogate(z, z.data(), topo, c), 1e-14);
    const auto r = grad_check(
        [&](std::span<const double> p) { return frozen_surrogate(z, p, topo, c); },
        out.grad_logits.data(), z.data(), 3e-4);
    EXPECT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(CombinedAux, GroupDecompositionWithSingleGroupAndPartition) {
  for (std::size_t n : {2u, 3u, 5u, 8u}) {
    const auto topo = ExpertTopology::make(1, 1, n, 1);
    const auto g = gate_from_logits(random_logits(25, n, n), 1);
    const auto out = combined_aux_loss(g, topo, LossCoefficients{0.4, 0.4, 0.4});
    EXPECT_NEAR(out.st, out.ep, 1e-15);
    EXPECT_NEAR(out.ep, out.pep, 1e-15);
  }
}

TEST(CombinedAux, PermutationWithinPartitionsIsEquivariant) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  Rng rng(31);
  const Matrix w = rng.normal_matrix(6, 8);
  const Matrix x = rng.normal_matrix(40, 6);
  // Swap the two experts inside every partition.
  const std::vector<std::size_t> perm = {1, 0, 3, 2, 5, 4, 7, 6};
  Matrix wp(6, 8);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 8; ++j) wp(r, perm[j]) = w(r, j);
  const auto a = gate(x, w, 1);
  const auto b = gate(x, wp, 1);
  const LossCoefficients c;
  const auto la = combined_aux_loss(a, topo, c);
  const auto lb = combined_aux_loss(b, topo, c);
  EXPECT_NEAR(la.st, lb.st, 1e-12);
  EXPECT_NEAR(la.ep, lb.ep, 1e-12);
  EXPECT_NEAR(la.pep, lb.pep, 1e-12);
  const auto sa = balance_stats(a, topo, Scope::global, 0);
  const auto sb = balance_stats(b, topo, Scope::global, 0);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(sa.token_fraction[j], sb.token_fraction[perm[j]], 1e-15);
    EXPECT_NEAR(sa.mean_prob[j], sb.mean_prob[perm[j]], 1e-15);
  }
}

TEST(Segment, IdentityAndConservation) {
  const ExpertFfnConfig base{8, 1024, 2, 512};
  const auto id = segment(base, 1);
  EXPECT_EQ(id.seg_experts, 8u);
  EXPECT_EQ(id.seg_hidden, 1024u);
  EXPECT_EQ(id.seg_top_k, 2u);
  const auto s = segment(base, 4);
  EXPECT_EQ(s.seg_experts, 32u);
  EXPECT_EQ(s.seg_hidden, 256u);
  EXPECT_EQ(s.seg_top_k, 8u);
  // Explicit counter: up and down projections per expert.
  std::uint64_t counted = 0;
  for (std::size_t e = 0; e < s.seg_experts; ++e) counted += 2ull * 512 * 256;
  EXPECT_EQ(s.total_params_after, counted);
  EXPECT_EQ(s.total_params_before, s.total_params_after);
  EXPECT_EQ(s.activated_params_before, s.activated_params_after);
  EXPECT_THROW(segment(ExpertFfnConfig{8, 1000, 2, 512}, 3), std::invalid_argument);
  EXPECT_THROW(segment(base, 0), std::invalid_argument);
}

TEST(Segment, ConservationForAllDivisors) {
  const ExpertFfnConfig base{6, 720, 3, 64};
  for (std::size_t m = 1; m <= 720; ++m) {
    if (720 % m != 0) continue;
    const auto s = segment(base, m);
    EXPECT_EQ(s.total_params_before, s.total_params_after) << m;
    EXPECT_EQ(s.activated_params_before, s.activated_params_after) << m;
  }
}

TEST(TrainGate, UniformInitStaysBalanced) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  GateTrainConfig cfg;
  cfg.init = GateInit::uniform;
  cfg.steps = 100;
  cfg.tokens_per_step = 4096;
  const auto r = train_gate(topo, LossCoefficients{}, cfg);
  ASSERT_EQ(r.trajectory.size(), 100u);
  for (const auto& p : r.trajectory) EXPECT_LT(p.max_f - p.min_f, 0.05) << "step " << p.step;
}

TEST(TrainGate, DeterministicForSeed) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  GateTrainConfig cfg;
  cfg.steps = 50;
  const auto a = train_gate(topo, LossCoefficients{}, cfg);
  const auto b = train_gate(topo, LossCoefficients{}, cfg);
  EXPECT_EQ(a.trajectory, b.trajectory);
  EXPECT_EQ(a.weights, b.weights);
  cfg.seed = 43;
  EXPECT_NE(train_gate(topo, LossCoefficients{}, cfg).trajectory, a.trajectory);
}

TEST(TrainGate, AdversarialInitReducesSpread) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  GateTrainConfig cfg;
  cfg.steps = 300;
  const auto r = train_gate(topo, LossCoefficients{}, cfg);
  const auto& first = r.trajectory.front();
  const auto& last = r.trajectory.back();
  EXPECT_GT(first.max_f - first.min_f, 0.9);
  EXPECT_LT(last.max_f - last.min_f, first.max_f - first.min_f);
}

TEST(TrainGate, Errors) {
  const auto topo = ExpertTopology::make(2, 2, 2, 1);
  GateTrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train_gate(topo, LossCoefficients{}, cfg), std::invalid_argument);
  cfg.steps = 1;
  cfg.lr = 0.0;
  EXPECT_THROW(train_gate(topo, LossCoefficients{}, cfg), std::invalid_argument);
  cfg.lr = 1e308;
  cfg.steps = 5;
  EXPECT_THROW(train_gate(topo, LossCoefficients{1, 1, 1}, cfg), NumericError);
  EXPECT_THROW(parse_gate_init("sideways"), std::invalid_argument);
  EXPECT_EQ(parse_gate_init("uniform"), GateInit::uniform);
}

}  // namespace
}  // namespace ylab::moe
