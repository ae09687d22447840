// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "ylab/attention.hpp"
#include "ylab/moe_router.hpp"
#include "ylab/packing.hpp"
#include "ylab/preference.hpp"
#include "ylab/toy_model.hpp"

namespace {

using namespace ylab;

void BM_MemoryAccount(benchmark::State& state) {
  const auto pattern = attn::LayerPattern::parse("3:1", 4096, true);
  const auto layers = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(attn::memory_account(pattern, layers, {}));
}
BENCHMARK(BM_MemoryAccount)->Arg(32)->Arg(1024);

void BM_AttendSliding(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix q = rng.normal_matrix(n, 32), k = rng.normal_matrix(n, 32), v = rng.normal_matrix(n, 32);
  for (auto _ : state) benchmark::DoNotOptimize(attn::attend_sliding(q, k, v, 16, true));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_AttendSliding)->Arg(64)->Arg(256);

void BM_AttendFull(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Matrix q = rng.normal_matrix(n, 32), k = rng.normal_matrix(n, 32), v = rng.normal_matrix(n, 32);
  for (auto _ : state) benchmark::DoNotOptimize(attn::attend_full(q, k, v, true));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_AttendFull)->Arg(64)->Arg(256);

attn::ToyTransformer bench_model(bool share) {
  attn::ToyModelConfig cfg;
  cfg.n_layers = 8;
  cfg.pattern = attn::LayerPattern::parse("3:1", 4, share);
  return attn::ToyTransformer(cfg);
}

void BM_DecodeStep(benchmark::State& state) {
  const auto model = bench_model(state.range(0) != 0);
  const std::size_t tokens = 64;
  for (auto _ : state) {
    auto cache = model.make_cache();
    for (std::size_t i = 0; i < tokens; ++i)
      benchmark::DoNotOptimize(model.decode_step(cache, static_cast<int>(i % model.vocab())));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens));
}
BENCHMARK(BM_DecodeStep)->Arg(0)->Arg(1);

void BM_Forward(benchmark::State& state) {
  const auto model = bench_model(true);
  std::vector<int> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i % model.vocab());
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_Forward)->Arg(64);

void BM_Pack(benchmark::State& state) {
  Rng rng(3);
  std::vector<std::vector<int>> samples(static_cast<std::size_t>(state.range(0)));
  for (auto& s : samples) s.assign(2 + rng.uniform_int(200), 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pack::pack(samples, 512, pack::PackPolicy::first_fit));
  }
}
BENCHMARK(BM_Pack)->Arg(64)->Arg(512);

void BM_CombinedAuxLoss(benchmark::State& state) {
  const auto topo = moe::ExpertTopology::make(2, 2, 2, 1);
  Rng rng(4);
  const auto g = moe::gate_from_logits(rng.normal_matrix(static_cast<std::size_t>(state.range(0)), 8), 1);
  const moe::LossCoefficients coeffs;
  for (auto _ : state) benchmark::DoNotOptimize(moe::combined_aux_loss(g, topo, coeffs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CombinedAuxLoss)->Arg(512)->Arg(4096);

void BM_SharedPrefixScore(benchmark::State& state) {
  const auto model = bench_model(true);
  pref::PreferencePair pair;
  pair.prompt.assign(static_cast<std::size_t>(state.range(0)), 3);
  pair.chosen = {1, 2, 3, 4, 5, 6};
  pair.rejected = {6, 5, 4, 3, 2, 1};
  for (auto _ : state) benchmark::DoNotOptimize(pref::score_pair_shared_prefix(model, pair));
}
BENCHMARK(BM_SharedPrefixScore)->Arg(8)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
