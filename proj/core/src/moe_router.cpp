// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/moe_router.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ylab::moe {

std::string_view to_string(Scope scope) noexcept {
  switch (scope) {
    case Scope::global: return "global";
    case Scope::group: return "group";
    case Scope::partition: return "partition";
  }
  return "unknown";
}

ExpertTopology ExpertTopology::make(std::size_t n_groups, std::size_t partitions_per_group,
                                    std::size_t experts_per_partition, std::size_t top_k) {
  ExpertTopology t;
  t.n_groups = n_groups;
  t.partitions_per_group = partitions_per_group;
  t.experts_per_partition = experts_per_partition;
  t.experts_per_group = partitions_per_group * experts_per_partition;
  t.n_experts = n_groups * t.experts_per_group;
  t.top_k = top_k;
  t.validate();
  return t;
}

void ExpertTopology::validate() const {
  if (n_experts < 1 || n_groups < 1 || experts_per_group < 1 || partitions_per_group < 1 ||
      experts_per_partition < 1 || top_k < 1) {
    throw std::invalid_argument("ExpertTopology: all counts must be >= 1");
  }
  if (n_experts != n_groups * experts_per_group) {
    throw std::invalid_argument("ExpertTopology: N != n_groups * N^g");
  }
  if (experts_per_group != partitions_per_group * experts_per_partition) {
    throw std::invalid_argument("ExpertTopology: N^g != partitions_per_group * N^p");
  }
  if (top_k > n_experts) {
    throw std::invalid_argument("ExpertTopology: top_k=" + std::to_string(top_k) +
                                " exceeds N=" + std::to_string(n_experts));
  }
}

std::size_t ExpertTopology::scope_units(Scope scope) const noexcept {
  switch (scope) {
    case Scope::global: return 1;
    case Scope::group: return n_groups;
    case Scope::partition: return n_partitions();
  }
  return 0;
}

std::size_t ExpertTopology::scope_width(Scope scope) const noexcept {
  switch (scope) {
    case Scope::global: return n_experts;
    case Scope::group: return experts_per_group;
    case Scope::partition: return experts_per_partition;
  }
  return 0;
}

std::size_t ExpertTopology::scope_unit_of(Scope scope, std::size_t expert) const noexcept {
  switch (scope) {
    case Scope::global: return 0;
    case Scope::group: return group_of(expert);
    case Scope::partition: return partition_of(expert);
  }
  return 0;
}

GateOutput gate_from_probs(Matrix probs, std::size_t top_k) {
  if (probs.rows() == 0 || probs.cols() == 0) {
    throw std::invalid_argument("gate: empty probability matrix");
  }
  if (top_k < 1 || top_k > probs.cols()) {
    throw std::invalid_argument("gate: top_k=" + std::to_string(top_k) + " outside [1, " +
                                std::to_string(probs.cols()) + "]");
  }
  GateOutput out;
  out.top_k = top_k;
  out.selected.reserve(probs.rows());
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    auto row = probs.row(t);
    double total = 0.0;
    for (double p : row) {
      if (!std::isfinite(p) || p < 0.0) {
        throw std::invalid_argument("gate: invalid probability in row " + std::to_string(t));
      }
      total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("gate: row " + std::to_string(t) + " does not sum to 1");
    }
    out.selected.push_back(topk(row, top_k).indices);
  }
  out.probs = std::move(probs);
  return out;
}

GateOutput gate_from_logits(const Matrix& logits, std::size_t top_k) {
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto p = softmax(logits.row(t));
    std::copy(p.begin(), p.end(), probs.row(t).begin());
  }
  return gate_from_probs(std::move(probs), top_k);
}

GateOutput gate(const Matrix& embeddings, const Matrix& weights, std::size_t top_k) {
  if (embeddings.cols() != weights.rows()) {
    throw std::invalid_argument("gate: embeddings " + shape_string(embeddings) +
                                " not conformable with weights " + shape_string(weights));
  }
  return gate_from_logits(matmul(embeddings, weights), top_k);
}

BalanceStats balance_stats(const GateOutput& gate, const ExpertTopology& topology, Scope scope,
                           std::size_t scope_index) {
  if (gate.n_experts() != topology.n_experts) {
    throw std::invalid_argument("balance_stats: gate has " + std::to_string(gate.n_experts()) +
                                " experts, topology has " + std::to_string(topology.n_experts));
  }
  if (scope_index >= topology.scope_units(scope)) {
    throw std::invalid_argument("balance_stats: " + std::string(to_string(scope)) + " index " +
                                std::to_string(scope_index) + " out of range");
  }
  const std::size_t width = topology.scope_width(scope);
  const std::size_t first = topology.first_expert(scope, scope_index);

  BalanceStats stats;
  stats.scope = scope;
  stats.scope_index = scope_index;
  stats.token_fraction.assign(width, 0.0);
  stats.mean_prob.assign(width, 0.0);

  for (std::size_t t = 0; t < gate.batch_size(); ++t) {
    const std::size_t top = gate.argmax(t);
    if (topology.scope_unit_of(scope, top) != scope_index) continue;
    ++stats.scope_token_count;
    stats.token_fraction[top - first] += 1.0;
    auto row = gate.probs.row(t);
    for (std::size_t i = 0; i < width; ++i) stats.mean_prob[i] += row[first + i];
  }
  if (stats.scope_token_count > 0) {
    const double inv = 1.0 / static_cast<double>(stats.scope_token_count);
    for (double& v : stats.token_fraction) v *= inv;
    for (double& v : stats.mean_prob) v *= inv;
  }
  return stats;
}

std::vector<BalanceStats> balance_stats_all(const GateOutput& gate,
                                            const ExpertTopology& topology, Scope scope) {
  std::vector<BalanceStats> out;
  out.reserve(topology.scope_units(scope));
  for (std::size_t u = 0; u < topology.scope_units(scope); ++u) {
    out.push_back(balance_stats(gate, topology, scope, u));
  }
  return out;
}

namespace {

double scope_term(const BalanceStats& s, double alpha) {
  if (s.scope_token_count == 0) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < s.token_fraction.size(); ++i) {
    dot += s.token_fraction[i] * s.mean_prob[i];
  }
  return alpha * static_cast<double>(s.token_fraction.size()) * dot;
}

double scoped_sum(std::span<const BalanceStats> stats, double alpha, Scope expected,
                  const char* name) {
  double total = 0.0;
  for (const auto& s : stats) {
    if (s.scope != expected) {
      throw std::invalid_argument(std::string(name) + ": expected " +
                                  std::string(to_string(expected)) + " scope, got " +
                                  std::string(to_string(s.scope)));
    }
    total += scope_term(s, alpha);
  }
  return total;
}

}  // namespace

double loss_st(const BalanceStats& stats, double alpha) {
  if (stats.scope != Scope::global) {
    throw std::invalid_argument("loss_st: expected global scope, got " +
                                std::string(to_string(stats.scope)));
  }
  return scope_term(stats, alpha);
}

double loss_ep(std::span<const BalanceStats> stats, double alpha) {
  return scoped_sum(stats, alpha, Scope::group, "loss_ep");
}

double loss_pep(std::span<const BalanceStats> stats, double alpha) {
  return scoped_sum(stats, alpha, Scope::partition, "loss_pep");
}

void LossCoefficients::validate() const {
  if (!(alpha_st >= 0.0) || !(alpha_ep >= 0.0) || !(alpha_pep >= 0.0)) {
    throw std::invalid_argument("LossCoefficients: alphas must be finite and >= 0");
  }
}

AuxLoss combined_aux_loss(const GateOutput& gate, const ExpertTopology& topology,
                          const LossCoefficients& coeffs) {
  coeffs.validate();
  AuxLoss out;
  const std::size_t tokens = gate.batch_size();
  const std::size_t n = gate.n_experts();
  // d loss / d p_i(x), accumulated over the three scopes.
  Matrix grad_probs(tokens, n);

  auto accumulate = [&](Scope scope, double alpha) {
    const auto stats = balance_stats_all(gate, topology, scope);
    double sum = 0.0;
    for (const auto& s : stats) {
      sum += scope_term(s, alpha);
      if (s.scope_token_count == 0 || alpha == 0.0) continue;
      const std::size_t width = s.token_fraction.size();
      const std::size_t first = topology.first_expert(scope, s.scope_index);
      const double scale =
          alpha * static_cast<double>(width) / static_cast<double>(s.scope_token_count);
      for (std::size_t t = 0; t < tokens; ++t) {
        if (topology.scope_unit_of(scope, gate.argmax(t)) != s.scope_index) continue;
        for (std::size_t i = 0; i < width; ++i) {
          grad_probs(t, first + i) += scale * s.token_fraction[i];
        }
      }
    }
    return sum;
  };

  out.st = accumulate(Scope::global, coeffs.alpha_st);
  out.ep = accumulate(Scope::group, coeffs.alpha_ep);
  out.pep = accumulate(Scope::partition, coeffs.alpha_pep);
  out.total = out.st + out.ep + out.pep;

  // Softmax Jacobian: dz_j = p_j (g_j - sum_i p_i g_i).
  out.grad_logits = Matrix(tokens, n);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto p = gate.probs.row(t);
    auto g = grad_probs.row(t);
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) inner += p[i] * g[i];
    auto dz = out.grad_logits.row(t);
    for (std::size_t j = 0; j < n; ++j) dz[j] = p[j] * (g[j] - inner);
  }
  return out;
}

std::uint64_t ffn_params(std::size_t n_experts, std::size_t hidden, std::size_t model_dim) {
  return static_cast<std::uint64_t>(n_experts) * 2u * static_cast<std::uint64_t>(model_dim) *
         static_cast<std::uint64_t>(hidden);
}

SegmentedConfig segment(const ExpertFfnConfig& base, std::size_t m) {
  if (m < 1) throw std::invalid_argument("segment: factor must be >= 1");
  if (base.n_experts < 1 || base.hidden < 1 || base.top_k < 1 || base.model_dim < 1) {
    throw std::invalid_argument("segment: base config counts must be >= 1");
  }
  if (base.top_k > base.n_experts) {
    throw std::invalid_argument("segment: base top_k exceeds expert count");
  }
  if (base.hidden % m != 0) {
    throw std::invalid_argument("segment: hidden dimension " + std::to_string(base.hidden) +
                                " is not divisible by " + std::to_string(m));
  }
  SegmentedConfig c;
  c.base_experts = base.n_experts;
  c.base_hidden = base.hidden;
  c.base_top_k = base.top_k;
  c.segment_factor = m;
  c.model_dim = base.model_dim;
  c.seg_experts = base.n_experts * m;
  c.seg_hidden = base.hidden / m;
  c.seg_top_k = base.top_k * m;
  c.total_params_before = ffn_params(c.base_experts, c.base_hidden, c.model_dim);
  c.total_params_after = ffn_params(c.seg_experts, c.seg_hidden, c.model_dim);
  c.activated_params_before = ffn_params(c.base_top_k, c.base_hidden, c.model_dim);
  c.activated_params_after = ffn_params(c.seg_top_k, c.seg_hidden, c.model_dim);
  return c;
}

TokenSource::TokenSource(std::size_t dim, std::uint64_t seed) : dim_(dim), rng_(seed) {
  if (dim < 2) throw std::invalid_argument("TokenSource: dim must be >= 2");
}

Matrix TokenSource::next(std::size_t tokens) {
  Matrix x(tokens, dim_);
  for (std::size_t t = 0; t < tokens; ++t) {
    x(t, 0) = 1.0;
    for (std::size_t j = 1; j < dim_; ++j) x(t, j) = rng_.normal();
  }
  return x;
}

GateInit parse_gate_init(std::string_view name) {
  if (name == "uniform") return GateInit::uniform;
  if (name == "adversarial") return GateInit::adversarial;
  if (name == "random") return GateInit::random;
  throw std::invalid_argument("unknown gate init '" + std::string(name) +
                              "' (expected uniform, adversarial or random)");
}

std::string_view to_string(GateInit init) noexcept {
  switch (init) {
    case GateInit::uniform: return "uniform";
    case GateInit::adversarial: return "adversarial";
    case GateInit::random: return "random";
  }
  return "unknown";
}

Matrix init_gate_weights(const GateTrainConfig& config, std::size_t n_experts) {
  Matrix w(config.dim, n_experts);
  switch (config.init) {
    case GateInit::uniform:
    case GateInit::adversarial:
      if (config.dim < n_experts + 1) {
        throw std::invalid_argument("init_gate_weights: dim must be >= n_experts + 1 for " +
                                    std::string(to_string(config.init)) + " init");
      }
      for (std::size_t i = 0; i < n_experts; ++i) w(i + 1, i) = config.feature_scale;
      if (config.init == GateInit::adversarial) w(0, 0) = config.adversarial_bias;
      break;
    case GateInit::random: {
      Rng rng(config.seed ^ 0xA5A5A5A5DEADBEEFULL);
      for (double& v : w.data()) v = config.feature_scale * rng.normal();
      break;
    }
  }
  return w;
}

GateTrainResult train_gate(const ExpertTopology& topology, const LossCoefficients& coeffs,
                           const GateTrainConfig& config) {
  topology.validate();
  coeffs.validate();
  if (config.steps < 1) throw std::invalid_argument("train_gate: steps must be >= 1");
  if (!(config.lr > 0.0)) throw std::invalid_argument("train_gate: lr must be > 0");
  if (config.tokens_per_step < 1) {
    throw std::invalid_argument("train_gate: tokens_per_step must be >= 1");
  }

  GateTrainResult result;
  result.weights = init_gate_weights(config, topology.n_experts);
  result.trajectory.reserve(config.steps);
  TokenSource source(config.dim, config.seed);

  for (std::size_t step = 0; step < config.steps; ++step) {
    const Matrix x = source.next(config.tokens_per_step);
    const GateOutput g = gate(x, result.weights, topology.top_k);
    const AuxLoss loss = combined_aux_loss(g, topology, coeffs);
    if (!std::isfinite(loss.total)) {
      throw NumericError("train_gate: non-finite loss at step " + std::to_string(step));
    }
    const auto global = balance_stats(g, topology, Scope::global, 0);
    const auto [lo, hi] =
        std::minmax_element(global.token_fraction.begin(), global.token_fraction.end());
    result.trajectory.push_back({step, loss.total, *hi, *lo});

    // dW = X^T dZ
    for (std::size_t t = 0; t < x.rows(); ++t) {
      auto xr = x.row(t);
      auto dz = loss.grad_logits.row(t);
      for (std::size_t r = 0; r < x.cols(); ++r) {
        auto wr = result.weights.row(r);
        const double scaled = config.lr * xr[r];
        for (std::size_t j = 0; j < dz.size(); ++j) wr[j] -= scaled * dz[j];
      }
    }
    if (!result.weights.all_finite()) {
      throw NumericError("train_gate: weights diverged at step " + std::to_string(step));
    }
  }
  return result;
}

}  // namespace ylab::moe
