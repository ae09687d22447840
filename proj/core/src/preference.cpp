// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab/preference.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ylab::pref {

void PreferencePair::validate() const {
  if (chosen.empty() || rejected.empty()) {
    throw std::invalid_argument("preference pair: responses must be non-empty");
  }
  if (chosen == rejected) {
    throw std::invalid_argument("preference pair: chosen and rejected are identical");
  }
}

double neg_log_sigmoid(double x) noexcept {
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

BtLoss bt_loss(double reward_chosen, double reward_rejected) noexcept {
  const double delta = reward_chosen - reward_rejected;
  const double g = -sigmoid(-delta);  // -(1 - sigma(delta))
  return {neg_log_sigmoid(delta), g, -g};
}

void DpoConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("dpo: beta must be a positive finite number");
  }
}

DpoLoss dpo_loss(const LogProbPair& policy, const LogProbPair& ref, const DpoConfig& config) {
  config.validate();
  DpoLoss out;
  out.margin = (policy.chosen - ref.chosen) - (policy.rejected - ref.rejected);
  const double z = config.beta * out.margin;
  out.loss = neg_log_sigmoid(z);
  const double g = config.beta * sigmoid(-z);
  out.grad_chosen = -g;
  out.grad_rejected = g;
  return out;
}

namespace {

std::vector<int> concat(std::span<const int> a, std::span<const int> b) {
  std::vector<int> seq(a.begin(), a.end());
  seq.insert(seq.end(), b.begin(), b.end());
  return seq;
}

// Row index of the logits that predict response token j, or none.
std::optional<std::size_t> predictor_row(std::size_t prompt_len, std::size_t j) {
  const std::size_t pos = prompt_len + j;
  if (pos == 0) return std::nullopt;
  return pos - 1;
}

}  // namespace

double response_logprob(const attn::ToyTransformer& model, std::span<const int> prompt,
                        std::span<const int> response) {
  const auto seq = concat(prompt, response);
  const Matrix logits = model.forward(seq);
  double total = 0.0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const auto row = predictor_row(prompt.size(), j);
    if (!row) continue;
    total += log_softmax(logits.row(*row))[static_cast<std::size_t>(response[j])];
  }
  return total;
}

void LogProbCache::insert(std::uint64_t pair_id, Branch branch, double logp) {
  if (sealed_) throw StateError("log-prob cache is sealed");
  if (!std::isfinite(logp)) {
    throw std::invalid_argument("log-prob cache: non-finite value for pair " +
                                std::to_string(pair_id));
  }
  if (!entries_.emplace(std::pair{pair_id, branch}, logp).second) {
    throw StateError("log-prob cache: duplicate entry for pair " + std::to_string(pair_id));
  }
}

double LogProbCache::get(std::uint64_t pair_id, Branch branch) const {
  const auto it = entries_.find({pair_id, branch});
  if (it == entries_.end()) {
    throw std::out_of_range("log-prob cache: no entry for pair " + std::to_string(pair_id) +
                            (branch == Branch::chosen ? " chosen" : " rejected"));
  }
  return it->second;
}

LogProbPair LogProbCache::get_pair(std::uint64_t pair_id) const {
  return {get(pair_id, Branch::chosen), get(pair_id, Branch::rejected)};
}

LogProbCache build_logp_cache(const attn::ToyTransformer& reference,
                              std::span<const PreferencePair> pairs, std::uint64_t snapshot_id) {
  LogProbCache cache(snapshot_id);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    pairs[i].validate();
    cache.insert(i, Branch::chosen, response_logprob(reference, pairs[i].prompt, pairs[i].chosen));
    cache.insert(i, Branch::rejected,
                 response_logprob(reference, pairs[i].prompt, pairs[i].rejected));
  }
  cache.seal();
  return cache;
}

namespace {

// Decodes `response` after a prefilled prompt whose last logits are `prev`.
double score_continuation(const attn::ToyTransformer& model, attn::KvCache& cache,
                          std::optional<std::vector<double>> prev,
                          std::span<const int> response) {
  double total = 0.0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    if (prev) total += log_softmax(*prev)[static_cast<std::size_t>(response[j])];
    if (j + 1 < response.size()) prev = model.decode_step(cache, response[j]);
  }
  return total;
}

}  // namespace

SharedPrefixScore score_pair_shared_prefix(const attn::ToyTransformer& model,
                                           const PreferencePair& pair) {
  pair.validate();
  model.check_tokens(pair.chosen);
  model.check_tokens(pair.rejected);
  auto cache = model.make_cache();
  std::optional<std::vector<double>> last;
  for (int t : pair.prompt) last = model.decode_step(cache, t);
  const auto boundary = cache.checkpoint();

  SharedPrefixScore out;
  out.logps.chosen = score_continuation(model, cache, last, pair.chosen);
  cache.rollback(boundary);
  if (cache.position() != pair.prompt.size()) {
    throw StateError("shared-prefix scoring: rollback did not land on the prompt boundary");
  }
  out.logps.rejected = score_continuation(model, cache, last, pair.rejected);
  out.recompute_savings = pair.prompt.size();
  return out;
}

std::vector<LogProbPair> score_batch_grouped(const attn::ToyTransformer& model,
                                             std::span<const PreferencePair> pairs) {
  const std::size_t n = pairs.size();
  std::vector<double> scores(2 * n);
  for (std::size_t s = 0; s < 2 * n; ++s) {
    const auto& p = pairs[s % n];
    scores[s] = response_logprob(model, p.prompt, s < n ? p.chosen : p.rejected);
  }
  std::vector<LogProbPair> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {scores[i], scores[n + i]};
  return out;
}

double batch_dpo_loss(std::span<const LogProbPair> policy, std::span<const LogProbPair> ref,
                      const DpoConfig& config) {
  if (policy.size() != ref.size()) {
    throw std::invalid_argument("batch_dpo_loss: policy and reference sizes differ");
  }
  if (policy.empty()) throw std::invalid_argument("batch_dpo_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < policy.size(); ++i) total += dpo_loss(policy[i], ref[i], config).loss;
  return total / static_cast<double>(policy.size());
}

namespace {

// Backbone logits rows that predict each scored response token.
struct ScoredBranch {
  std::vector<std::vector<double>> rows;
  std::vector<int> targets;
};

ScoredBranch scored_branch(const attn::ToyTransformer& model, std::span<const int> prompt,
                           std::span<const int> response) {
  const auto seq = concat(prompt, response);
  const Matrix logits = model.forward(seq);
  ScoredBranch b;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const auto row = predictor_row(prompt.size(), j);
    if (!row) continue;
    const auto r = logits.row(*row);
    b.rows.emplace_back(r.begin(), r.end());
    b.targets.push_back(response[j]);
  }
  return b;
}

// Log-prob under logits + bias; accumulates d logp / d bias into `grad`.
double biased_logprob(const ScoredBranch& b, std::span<const double> bias,
                      std::vector<double>* grad) {
  double total = 0.0;
  std::vector<double> shifted(bias.size());
  for (std::size_t r = 0; r < b.rows.size(); ++r) {
    for (std::size_t v = 0; v < bias.size(); ++v) shifted[v] = b.rows[r][v] + bias[v];
    const auto lp = log_softmax(shifted);
    const auto tgt = static_cast<std::size_t>(b.targets[r]);
    total += lp[tgt];
    if (grad) {
      for (std::size_t v = 0; v < bias.size(); ++v) (*grad)[v] -= std::exp(lp[v]);
      (*grad)[tgt] += 1.0;
    }
  }
  return total;
}

}  // namespace

DpoTrainResult train_dpo(const attn::ToyTransformer& backbone,
                         std::span<const PreferencePair> pairs, const DpoTrainConfig& config,
                         ReferenceSource source, const LogProbCache* cache) {
  config.dpo.validate();
  if (pairs.empty()) throw std::invalid_argument("train_dpo: no pairs");
  if (source == ReferenceSource::cached) {
    if (!cache) throw std::invalid_argument("train_dpo: cached reference needs a cache");
    if (!cache->sealed()) throw StateError("train_dpo: reference cache is not sealed");
  }
  const std::size_t vocab = backbone.vocab();
  std::vector<ScoredBranch> chosen, rejected;
  for (const auto& p : pairs) {
    p.validate();
    chosen.push_back(scored_branch(backbone, p.prompt, p.chosen));
    rejected.push_back(scored_branch(backbone, p.prompt, p.rejected));
  }

  DpoTrainResult result;
  result.output_bias.assign(vocab, 0.0);
  const double n = static_cast<double>(pairs.size());
  for (std::size_t step = 0; step < config.steps; ++step) {
    DpoStepRecord rec;
    rec.step = step;
    std::vector<double> grad(vocab, 0.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      LogProbPair ref;
      if (source == ReferenceSource::cached) {
        ref = cache->get_pair(i);
      } else {
        ref = {response_logprob(backbone, pairs[i].prompt, pairs[i].chosen),
               response_logprob(backbone, pairs[i].prompt, pairs[i].rejected)};
      }
      std::vector<double> gc(vocab, 0.0), gr(vocab, 0.0);
      const LogProbPair pol{biased_logprob(chosen[i], result.output_bias, &gc),
                            biased_logprob(rejected[i], result.output_bias, &gr)};
      const DpoLoss l = dpo_loss(pol, ref, config.dpo);
      rec.margins.push_back(l.margin);
      rec.losses.push_back(l.loss);
      rec.mean_loss += l.loss / n;
      for (std::size_t v = 0; v < vocab; ++v) {
        grad[v] += (l.grad_chosen * gc[v] + l.grad_rejected * gr[v]) / n;
      }
    }
    for (std::size_t v = 0; v < vocab; ++v) result.output_bias[v] -= config.lr * grad[v];
    result.steps.push_back(std::move(rec));
  }
  return result;
}

double synthetic_reward(std::span<const int> /*prompt*/, std::span<const int> response) {
  if (response.empty()) return 0.0;
  double total = 0.0;
  for (int t : response) total += std::sin(1.7 * t + 0.3);
  return total / static_cast<double>(response.size());
}

double LinearRewardHead::operator()(std::span<const int> /*prompt*/,
                                    std::span<const int> response) const {
  if (response.empty()) return 0.0;
  double total = 0.0;
  for (int t : response) total += weights.at(static_cast<std::size_t>(t));
  return total / static_cast<double>(response.size());
}

std::pair<LinearRewardHead, double> train_reward_head(std::span<const PreferencePair> pairs,
                                                      std::size_t vocab, std::size_t steps,
                                                      double lr) {
  if (pairs.empty()) throw std::invalid_argument("train_reward_head: no pairs");
  LinearRewardHead head{std::vector<double>(vocab, 0.0)};
  const double n = static_cast<double>(pairs.size());
  auto add_features = [&](std::vector<double>& g, std::span<const int> resp, double scale) {
    for (int t : resp) g.at(static_cast<std::size_t>(t)) += scale / static_cast<double>(resp.size());
  };
  double mean_loss = 0.0;
  for (std::size_t step = 0; step <= steps; ++step) {
    std::vector<double> grad(vocab, 0.0);
    mean_loss = 0.0;
    for (const auto& p : pairs) {
      p.validate();
      const BtLoss l = bt_loss(head({}, p.chosen), head({}, p.rejected));
      mean_loss += l.loss / n;
      add_features(grad, p.chosen, l.grad_chosen / n);
      add_features(grad, p.rejected, l.grad_rejected / n);
    }
    if (step == steps) break;
    for (std::size_t v = 0; v < vocab; ++v) head.weights[v] -= lr * grad[v];
  }
  return {std::move(head), mean_loss};
}

SampleResult sample_and_pair(const attn::ToyTransformer& model, const RewardFn& reward,
                             std::span<const int> prompt, const SampleConfig& config) {
  if (config.n_candidates < 2) throw std::invalid_argument("sample_and_pair: need >= 2 candidates");
  if (config.temperatures.empty()) throw std::invalid_argument("sample_and_pair: no temperatures");
  for (double t : config.temperatures) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      throw std::invalid_argument("sample_and_pair: temperatures must be positive");
    }
  }
  if (!(config.min_gap >= 0.0)) throw std::invalid_argument("sample_and_pair: min_gap must be >= 0");
  if (config.response_len < 1) throw std::invalid_argument("sample_and_pair: response_len must be >= 1");
  model.check_tokens(prompt);

  auto cache = model.make_cache();
  std::optional<std::vector<double>> last;
  for (int t : prompt) last = model.decode_step(cache, t);
  const auto boundary = cache.checkpoint();

  Rng rng(config.seed);
  SampleResult out;
  const std::size_t vocab = model.vocab();
  for (std::size_t c = 0; c < config.n_candidates; ++c) {
    const double temp = config.temperatures[c % config.temperatures.size()];
    cache.rollback(boundary);
    auto logits = last;
    std::vector<int> resp;
    for (std::size_t j = 0; j < config.response_len; ++j) {
      int tok;
      if (logits) {
        std::vector<double> scaled(*logits);
        for (double& x : scaled) x /= temp;
        tok = static_cast<int>(rng.categorical(softmax(scaled)));
      } else {
        tok = static_cast<int>(rng.uniform_int(vocab));
      }
      resp.push_back(tok);
      if (j + 1 < config.response_len) logits = model.decode_step(cache, tok);
    }
    out.rewards.push_back(reward(prompt, resp));
    out.candidates.push_back(std::move(resp));
  }

  for (std::size_t c = 1; c < out.rewards.size(); ++c) {
    if (out.rewards[c] > out.rewards[out.best]) out.best = c;
    if (out.rewards[c] < out.rewards[out.worst]) out.worst = c;
  }
  const double gap = out.rewards[out.best] - out.rewards[out.worst];
  if (out.best != out.worst && gap >= config.min_gap &&
      out.candidates[out.best] != out.candidates[out.worst]) {
    out.pair = PreferencePair{{prompt.begin(), prompt.end()},
                              out.candidates[out.best],
                              out.candidates[out.worst]};
  }
  return out;
}

}  // namespace ylab::pref
