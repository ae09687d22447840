// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ylab/toy_model.hpp"

namespace ylab::pref {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;

  /// Throws std::invalid_argument when a response is empty or both are equal.
  void validate() const;
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

enum class Branch : std::uint8_t { chosen = 0, rejected = 1 };

struct BtLoss {
  double loss = 0.0;
  double grad_chosen = 0.0;    // d loss / d r_chosen
  double grad_rejected = 0.0;  // d loss / d r_rejected
};

/// -log sigmoid(r_chosen - r_rejected).
BtLoss bt_loss(double reward_chosen, double reward_rejected) noexcept;

/// -log sigmoid(x), evaluated without overflow for large |x|.
double neg_log_sigmoid(double x) noexcept;
/// sigmoid(x) for either sign of x.
double sigmoid(double x) noexcept;

struct DpoConfig {
  double beta = 0.1;
  void validate() const;
};

struct LogProbPair {
  double chosen = 0.0;
  double rejected = 0.0;
};

struct DpoLoss {
  double loss = 0.0;
  /// (pi_w - ref_w) - (pi_l - ref_l), before scaling by beta.
  double margin = 0.0;
  double grad_chosen = 0.0;    // d loss / d policy chosen log-prob
  double grad_rejected = 0.0;  // d loss / d policy rejected log-prob
};

DpoLoss dpo_loss(const LogProbPair& policy, const LogProbPair& ref, const DpoConfig& config);

/// Summed log-probability of `response` given `prompt` under one full forward
/// of prompt+response. Every response token that has a predecessor is scored;
/// with an empty prompt the first response token has no context and is skipped.
double response_logprob(const attn::ToyTransformer& model, std::span<const int> prompt,
                        std::span<const int> response);

/// Reference log-probabilities keyed by (pair id, branch). Filled once for a
/// dataset snapshot, then sealed; lookups are safe from several threads.
class LogProbCache {
 public:
  explicit LogProbCache(std::uint64_t snapshot_id = 0) : snapshot_id_(snapshot_id) {}

  std::uint64_t snapshot_id() const noexcept { return snapshot_id_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool sealed() const noexcept { return sealed_; }

  /// Throws StateError once sealed or on a duplicate key, and
  /// std::invalid_argument for non-finite values.
  void insert(std::uint64_t pair_id, Branch branch, double logp);
  void seal() noexcept { sealed_ = true; }

  /// Throws std::out_of_range for a missing entry.
  double get(std::uint64_t pair_id, Branch branch) const;
  LogProbPair get_pair(std::uint64_t pair_id) const;

  const std::map<std::pair<std::uint64_t, Branch>, double>& entries() const noexcept {
    return entries_;
  }

 private:
  std::uint64_t snapshot_id_;
  bool sealed_ = false;
  std::map<std::pair<std::uint64_t, Branch>, double> entries_;
};

/// Pair ids are positions in `pairs`. The returned cache is sealed.
LogProbCache build_logp_cache(const attn::ToyTransformer& reference,
                              std::span<const PreferencePair> pairs,
                              std::uint64_t snapshot_id = 0);

/// Flat little-endian file: "YLLC", u32 version, u64 count, then
/// (u64 pair id, u8 branch, f64 logp) records in key order.
inline constexpr std::uint32_t kLogpCacheVersion = 1;
void write_logp_cache(std::ostream& out, const LogProbCache& cache);
/// Throws std::runtime_error on bad magic, version, truncation or branch.
LogProbCache read_logp_cache(std::istream& in, std::uint64_t snapshot_id = 0);

struct SharedPrefixScore {
  LogProbPair logps;
  /// Prompt tokens whose K/V were reused for the rejected branch.
  std::size_t recompute_savings = 0;
};

/// Prefills the prompt once, scores the chosen branch, rolls the cache back to
/// the prompt boundary and scores the rejected branch.
SharedPrefixScore score_pair_shared_prefix(const attn::ToyTransformer& model,
                                           const PreferencePair& pair);

/// Scores a batch as one list of sequences: every chosen response first,
/// then every rejected one. Returns per-pair log-probs.
std::vector<LogProbPair> score_batch_grouped(const attn::ToyTransformer& model,
                                             std::span<const PreferencePair> pairs);

/// Mean DPO loss over a batch.
double batch_dpo_loss(std::span<const LogProbPair> policy, std::span<const LogProbPair> ref,
                      const DpoConfig& config);

enum class ReferenceSource { cached, inline_model };

struct DpoTrainConfig {
  DpoConfig dpo;
  double lr = 1.0;
  std::size_t steps = 5;
};

struct DpoStepRecord {
  std::size_t step = 0;
  std::vector<double> margins;  // per pair
  std::vector<double> losses;   // per pair
  double mean_loss = 0.0;
};

struct DpoTrainResult {
  std::vector<DpoStepRecord> steps;
  std::vector<double> output_bias;
};

/// DPO on a policy made of the frozen `backbone` plus a trainable output bias
/// over the vocabulary; the reference is the backbone itself. With
/// ReferenceSource::cached, reference log-probs come from `cache` (required);
/// otherwise they are recomputed from the backbone at every step.
DpoTrainResult train_dpo(const attn::ToyTransformer& backbone,
                         std::span<const PreferencePair> pairs, const DpoTrainConfig& config,
                         ReferenceSource source, const LogProbCache* cache = nullptr);

using RewardFn = std::function<double(std::span<const int> prompt, std::span<const int> response)>;

/// Deterministic scorer with no learned state: mean of sin(1.7 t + 0.3) over
/// response tokens t.
double synthetic_reward(std::span<const int> prompt, std::span<const int> response);

/// Bag-of-tokens linear reward: w . counts(response) / |response|.
struct LinearRewardHead {
  std::vector<double> weights;
  double operator()(std::span<const int> prompt, std::span<const int> response) const;
};

/// Fits a LinearRewardHead to pairs with the Bradley-Terry loss by gradient
/// descent. Returns the head and the final mean loss.
std::pair<LinearRewardHead, double> train_reward_head(std::span<const PreferencePair> pairs,
                                                      std::size_t vocab, std::size_t steps,
                                                      double lr);

struct SampleConfig {
  std::size_t n_candidates = 16;
  std::vector<double> temperatures = {0.7, 1.0, 1.3};
  double min_gap = 0.0;
  std::size_t response_len = 8;
  std::uint64_t seed = 42;
};

struct SampleResult {
  std::vector<std::vector<int>> candidates;
  std::vector<double> rewards;
  std::size_t best = 0;   // lowest index among maxima
  std::size_t worst = 0;  // lowest index among minima
  std::optional<PreferencePair> pair;
};

/// Samples candidates from the model continuing `prompt` (candidate c uses
/// temperature temperatures[c % size]), scores them and pairs the best with
/// the worst. No pair when the gap is below min_gap or the two responses are
/// identical. An empty prompt draws each first token uniformly.
SampleResult sample_and_pair(const attn::ToyTransformer& model, const RewardFn& reward,
                             std::span<const int> prompt, const SampleConfig& config);

}  // namespace ylab::pref
