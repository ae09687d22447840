// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/dispatch_sim.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <map>
#include <stdexcept>

namespace ylab::dispatch {

std::uint64_t DispatchPlan::total_units() const noexcept {
  std::uint64_t total = 0;
  for (auto c : per_expert_tokens) total += c;
  return total;
}

std::uint64_t DispatchPlan::remote_units() const noexcept {
  std::uint64_t remote = 0;
  for (const auto& m : messages) {
    if (m.source_rank % topology.n_groups != m.dest_group) remote += m.tokens;
  }
  return remote;
}

DispatchPlan dispatch(const moe::GateOutput& gate, const moe::ExpertTopology& topology,
                      std::size_t source_ranks) {
  topology.validate();
  if (gate.n_experts() != topology.n_experts) {
    throw std::invalid_argument("dispatch: gate/topology expert count mismatch");
  }
  if (source_ranks < 1) throw std::invalid_argument("dispatch: source_ranks must be >= 1");

  DispatchPlan plan;
  plan.topology = topology;
  plan.source_ranks = source_ranks;
  plan.per_expert_tokens.assign(topology.n_experts, 0);
  plan.per_group_tokens.assign(topology.n_groups, 0);
  plan.per_partition_tokens.assign(topology.n_partitions(), 0);

  std::vector<std::uint64_t> traffic(source_ranks * topology.n_groups, 0);
  for (std::size_t t = 0; t < gate.batch_size(); ++t) {
    const std::size_t rank = t % source_ranks;
    for (std::size_t e : gate.selected[t]) {
      ++plan.per_expert_tokens[e];
      ++plan.per_group_tokens[topology.group_of(e)];
      ++plan.per_partition_tokens[topology.partition_of(e)];
      ++traffic[rank * topology.n_groups + topology.group_of(e)];
    }
  }
  for (std::size_t r = 0; r < source_ranks; ++r) {
    for (std::size_t g = 0; g < topology.n_groups; ++g) {
      const auto count = traffic[r * topology.n_groups + g];
      if (count > 0) plan.messages.push_back({r, g, count});
    }
  }
  return plan;
}

std::string to_string(LoadScope scope) {
  return scope == LoadScope::group ? "group" : "partition";
}

ImbalanceReport imbalance(std::span<const std::uint64_t> loads, LoadScope scope) {
  ImbalanceReport r;
  r.scope = scope;
  if (loads.empty()) return r;
  double total = 0.0;
  for (auto v : loads) {
    total += static_cast<double>(v);
    r.max_load = std::max(r.max_load, v);
  }
  r.mean_load = total / static_cast<double>(loads.size());
  double ss = 0.0;
  for (auto v : loads) {
    const double d = static_cast<double>(v) - r.mean_load;
    ss += d * d;
  }
  r.stddev = std::sqrt(ss / static_cast<double>(loads.size()));
  r.imbalance_ratio = r.mean_load > 0.0 ? static_cast<double>(r.max_load) / r.mean_load : 1.0;
  return r;
}

ImbalanceReport imbalance(const DispatchPlan& plan, LoadScope scope) {
  return scope == LoadScope::group ? imbalance(plan.per_group_tokens, scope)
                                   : imbalance(plan.per_partition_tokens, scope);
}

std::vector<RegimeVariant> standard_variants() {
  return {
      {"paper", moe::LossCoefficients{1e-6, 1e-4, 1e-3}},
      {"st_only", moe::LossCoefficients{1e-6, 0.0, 0.0}},
      {"zero", moe::LossCoefficients{0.0, 0.0, 0.0}},
  };
}

namespace {

RegimeResult run_variant(const moe::ExpertTopology& topology, const RegimeVariant& variant,
                         const RegimeConfig& config) {
  const auto trained = moe::train_gate(topology, variant.coeffs, config.train);
  // Held-out stream: different seed from the training stream, same for all variants.
  moe::TokenSource held_out(config.train.dim, config.train.seed ^ 0x9E3779B97F4A7C15ULL);
  const auto gate = moe::gate(held_out.next(config.held_out_tokens), trained.weights,
                              topology.top_k);
  const auto plan = dispatch(gate, topology, config.source_ranks);
  return RegimeResult{variant.name, imbalance(plan, LoadScope::group),
                      imbalance(plan, LoadScope::partition), trained.trajectory.back()};
}

}  // namespace

std::vector<RegimeResult> compare_regimes(const moe::ExpertTopology& topology,
                                          std::span<const RegimeVariant> variants,
                                          const RegimeConfig& config) {
  if (variants.empty()) throw std::invalid_argument("compare_regimes: no variants");
  std::vector<RegimeResult> results(variants.size());
  const std::size_t jobs = std::max<std::size_t>(1, config.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < variants.size(); ++i) {
      results[i] = run_variant(topology, variants[i], config);
    }
    return results;
  }
  for (std::size_t begin = 0; begin < variants.size(); begin += jobs) {
    const std::size_t end = std::min(variants.size(), begin + jobs);
    std::vector<std::future<RegimeResult>> pending;
    for (std::size_t i = begin; i < end; ++i) {
      pending.push_back(std::async(std::launch::async, run_variant, std::cref(topology),
                                   std::cref(variants[i]), std::cref(config)));
    }
    for (std::size_t i = begin; i < end; ++i) results[i] = pending[i - begin].get();
  }
  return results;
}

}  // namespace ylab::dispatch
