// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab_tools/acceptance.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ylab/dispatch_sim.hpp"
#include "ylab/kv_cache.hpp"
#include "ylab/moe_router.hpp"
#include "ylab/numkit.hpp"
#include "ylab/packing.hpp"
#include "ylab/preference.hpp"
#include "ylab/toy_model.hpp"
#include "ylab_tools/commands.hpp"

namespace ylab::cli {

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// KV memory

constexpr std::uint64_t kWindow = 4096;
constexpr std::uint64_t kContext = 65536;
constexpr std::size_t kLayers = 32;

attn::CacheLayoutParams paper_layout() {
  attn::CacheLayoutParams p;
  p.context_len = kContext;
  p.n_heads = 8;
  p.head_dim = 128;
  p.bytes_per_element = 2;
  return p;
}

bool check_kv_reduction(std::string& detail) {
  const auto params = paper_layout();
  const auto pattern = attn::LayerPattern::parse("3:1", kWindow, true);
  const auto layout = attn::memory_account(pattern, kLayers, params);

  // Per 8 layers: six sliding layers hold W tokens, the shared full pair holds L.
  const std::uint64_t bpt = 2ull * params.n_heads * params.head_dim * params.bytes_per_element;
  const std::uint64_t closed = bpt * (kLayers / 8) * (6 * kWindow + kContext);
  const double expected_pct = 100.0 * static_cast<double>(8 * kContext - 6 * kWindow - kContext) /
                              static_cast<double>(8 * kContext);

  attn::KvCache cache(pattern, kLayers, 1);
  const double one[] = {1.0};
  for (std::uint64_t pos = 0; pos < kContext; ++pos) {
    for (std::size_t l = 0; l < kLayers; ++l)
      if (cache.sharing().owns_cache(l)) cache.write(l, one, one);
    cache.advance();
  }
  const std::uint64_t walked = cache.resident_bytes(params);

  std::ostringstream cli_out, cli_err;
  const int rc = run_main({"kv-memory", "--window", "4096", "--context", "65536", "--pattern",
                           "3:1", "--share"},
                          cli_out, cli_err);
  std::string last_field;
  {
    std::istringstream lines(cli_out.str());
    std::string line;
    std::getline(lines, line);  // header
    std::getline(lines, line);
    last_field = line.substr(line.rfind(',') + 1);
  }

  const double pct = layout.reduction * 100.0;
  detail = fmt::format("reduction={}% (closed form {}%), cli={}, bytes={} walk={} closed={}", pct,
                       expected_pct, last_field, layout.total_bytes, walked, closed);
  return rc == 0 && pct == 82.8125 && pct == expected_pct && last_field == "82.8125" &&
         layout.total_bytes == closed && walked == closed;
}

bool check_half_cache(std::string& detail) {
  const auto params = paper_layout();
  const auto layout =
      attn::memory_account(attn::LayerPattern::parse("full", kWindow, true), kLayers, params);
  const std::uint64_t bpt = 2ull * params.n_heads * params.head_dim * params.bytes_per_element;
  const std::uint64_t closed = bpt * (kLayers / 2) * kContext;
  const double pct = layout.reduction * 100.0;
  detail = fmt::format("reduction={}%, bytes={} closed={}", pct, layout.total_bytes, closed);
  return pct == 50.0 && layout.total_bytes == closed && layout.baseline_bytes == 2 * closed;
}

// ---------------------------------------------------------------------------
// Loss minimum

// All points of the N-simplex whose coordinates are multiples of 1/steps.
void simplex_points(std::size_t n, std::size_t steps, std::vector<std::size_t>& cur,
                    std::vector<std::vector<std::size_t>>& out) {
  if (cur.size() + 1 == n) {
    const std::size_t used = std::accumulate(cur.begin(), cur.end(), std::size_t{0});
    cur.push_back(steps - used);
    out.push_back(cur);
    cur.pop_back();
    return;
  }
  const std::size_t used = std::accumulate(cur.begin(), cur.end(), std::size_t{0});
  for (std::size_t k = 0; k <= steps - used; ++k) {
    cur.push_back(k);
    simplex_points(n, steps, cur, out);
    cur.pop_back();
  }
}

struct ScopeSetup {
  moe::Scope scope;
  moe::ExpertTopology topo;
  double alpha;
};

// Loss of unit 0 of `scope` for a batch of rows, each supported inside unit 0.
// A few tokens routed to the last unit ride along to exercise the restriction.
double unit_loss(const ScopeSetup& s, const std::vector<std::vector<double>>& unit_rows) {
  const std::size_t n = s.topo.n_experts;
  const std::size_t width = s.topo.scope_width(s.scope);
  const std::size_t other_first = n - width;
  const bool has_other = s.scope != moe::Scope::global;
  const std::size_t extra = has_other ? 3 : 0;
  Matrix probs(unit_rows.size() + extra, n, 0.0);
  for (std::size_t t = 0; t < unit_rows.size(); ++t)
    for (std::size_t i = 0; i < width; ++i) probs(t, i) = unit_rows[t][i];
  for (std::size_t e = 0; e < extra; ++e) probs(unit_rows.size() + e, other_first + e % width) = 1.0;
  const auto gate = moe::gate_from_probs(std::move(probs), 1);
  const auto stats = moe::balance_stats(gate, s.topo, s.scope, 0);
  switch (s.scope) {
    case moe::Scope::global:
      return moe::loss_st(stats, s.alpha);
    case moe::Scope::group:
      return moe::loss_ep(std::span(&stats, 1), s.alpha);
    case moe::Scope::partition:
      return moe::loss_pep(std::span(&stats, 1), s.alpha);
  }
  return 0.0;
}

bool check_loss_minimum(std::string& detail) {
  constexpr std::size_t kSteps = 20;  // grid step 0.05
  bool ok = true;
  std::string parts;
  for (std::size_t n : {2, 3, 4}) {
    const std::vector<ScopeSetup> setups = {
        {moe::Scope::global, moe::ExpertTopology::make(1, 1, n, 1), 1e-6},
        {moe::Scope::group, moe::ExpertTopology::make(2, 1, n, 1), 1e-4},
        {moe::Scope::partition, moe::ExpertTopology::make(1, 2, n, 1), 1e-3},
    };
    std::vector<std::vector<std::size_t>> points;
    std::vector<std::size_t> cur;
    simplex_points(n, kSteps, cur, points);

    for (const auto& s : setups) {
      // Uniform routing: every token carries the uniform row.
      std::vector<std::vector<double>> uniform_rows(kSteps, std::vector<double>(n, 1.0 / n));
      const double at_uniform = unit_loss(s, uniform_rows);
      double grid_min = std::numeric_limits<double>::infinity();
      for (const auto& pt : points) {
        std::vector<double> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<double>(pt[i]) / kSteps;
        const bool is_uniform =
            std::all_of(pt.begin(), pt.end(), [&](std::size_t c) { return c * n == kSteps; });

        // (a) one-hot tokens realising fractions p: f = P = p.
        std::vector<std::vector<double>> onehot;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < pt[i]; ++c) {
            std::vector<double> row(n, 0.0);
            row[i] = 1.0;
            onehot.push_back(std::move(row));
          }
        // (b) every token routes with the same soft row p.
        const std::vector<std::vector<double>> soft(kSteps, p);

        for (double v : {unit_loss(s, onehot), unit_loss(s, soft)}) {
          grid_min = std::min(grid_min, v);
          if (v < at_uniform - 1e-9) ok = false;
          if (std::fabs(v - s.alpha) <= 1e-12 * s.alpha) {
            if (!is_uniform) ok = false;
          }
        }
      }
      if (std::fabs(at_uniform - s.alpha) > 1e-12 * s.alpha) ok = false;
      parts += fmt::format(" N={} {}: uniform={:.6g} grid_min={:.6g} ({} pts);", n,
                           moe::to_string(s.scope), at_uniform, grid_min, 2 * points.size());
    }
  }
  detail = "minimum equals alpha only at uniform routing;" + parts;
  if (!detail.empty() && detail.back() == ';') detail.pop_back();
  return ok;
}

// ---------------------------------------------------------------------------
// Gradients

bool check_gradients(std::string& detail) {
  const auto aux = gradcheck_aux_loss(20, 3e-4, 42);
  const auto dpo = gradcheck_dpo(20, 3e-4, 42);
  const auto bt = gradcheck_bt(20, 3e-4, 42);
  detail = fmt::format("max rel error aux={:.3g} dpo={:.3g} bt={:.3g} (limit 1e-6)",
                       aux.max_rel_error, dpo.max_rel_error, bt.max_rel_error);
  return aux.max_rel_error < 1e-6 && dpo.max_rel_error < 1e-6 && bt.max_rel_error < 1e-6;
}

// ---------------------------------------------------------------------------
// Balance convergence

bool check_balance_convergence(std::string& detail) {
  const auto topo = moe::ExpertTopology::make(2, 2, 2, 1);
  dispatch::RegimeConfig rc;
  rc.train.init = moe::GateInit::adversarial;
  rc.train.seed = 42;
  rc.train.steps = 2000;
  const std::vector<dispatch::RegimeVariant> variants = {
      {"paper", moe::LossCoefficients{1e-6, 1e-4, 1e-3}},
      {"zero", moe::LossCoefficients{0.0, 0.0, 0.0}},
  };
  const auto res = dispatch::compare_regimes(topo, variants, rc);
  const auto& fp = res[0].final_point;
  const double spread = fp.max_f - fp.min_f;
  const double ratio = res[0].partition.imbalance_ratio;
  const double control = res[1].partition.imbalance_ratio;
  detail = fmt::format("final max_f-min_f={:.4f} (limit 0.1); partition imbalance {:.4f} vs "
                       "alpha=0 control {:.4f}",
                       spread, ratio, control);
  return spread < 0.1 && ratio <= control;
}

// ---------------------------------------------------------------------------
// Segmentation

bool check_segmentation(std::string& detail) {
  Rng rng(42);
  std::size_t cases = 0;
  bool ok = true;
  for (int c = 0; c < 10; ++c) {
    moe::ExpertFfnConfig base;
    base.n_experts = 1 + rng.uniform_int(16);
    base.top_k = 1 + rng.uniform_int(base.n_experts);
    base.hidden = 8 * (1 + rng.uniform_int(256));
    base.model_dim = 16 + rng.uniform_int(1009);
    // Counted weight by weight: up-projection d x h plus down-projection h x d.
    auto expert_weights = [](std::uint64_t d, std::uint64_t h) { return d * h + h * d; };
    std::uint64_t total_before = 0;
    for (std::size_t e = 0; e < base.n_experts; ++e)
      total_before += expert_weights(base.model_dim, base.hidden);
    std::uint64_t active_before = 0;
    for (std::size_t e = 0; e < base.top_k; ++e)
      active_before += expert_weights(base.model_dim, base.hidden);

    for (std::size_t m : {1, 2, 4, 8}) {
      if (base.hidden % m != 0) continue;
      ++cases;
      const auto seg = moe::segment(base, m);
      std::uint64_t total_after = 0;
      for (std::size_t e = 0; e < seg.seg_experts; ++e)
        total_after += expert_weights(seg.model_dim, seg.seg_hidden);
      std::uint64_t active_after = 0;
      for (std::size_t e = 0; e < seg.seg_top_k; ++e)
        active_after += expert_weights(seg.model_dim, seg.seg_hidden);
      ok = ok && seg.seg_experts == base.n_experts * m && seg.seg_top_k == base.top_k * m &&
           seg.seg_hidden * m == base.hidden && total_after == total_before &&
           active_after == active_before && seg.total_params_before == total_before &&
           seg.total_params_after == total_after && seg.activated_params_before == active_before &&
           seg.activated_params_after == active_after;
    }
  }
  detail = fmt::format("{} (config, m) cases, total and activated counts preserved", cases);
  return ok && cases == 40;
}

// ---------------------------------------------------------------------------
// Packing

attn::ToyTransformer packing_model(std::uint64_t seed) {
  attn::ToyModelConfig cfg;
  cfg.n_layers = 8;
  cfg.pattern = attn::LayerPattern::parse("3:1", 4, true);
  cfg.seed = seed;
  return attn::ToyTransformer(cfg);
}

bool check_packed_loss(std::string& detail) {
  double worst_bca = 0.0;
  double min_leak = std::numeric_limits<double>::infinity();
  bool ok = true;
  for (std::uint64_t set = 0; set < 20; ++set) {
    Rng rng(1000 + set);
    const auto model = packing_model(set);
    std::vector<std::vector<int>> samples(3 + rng.uniform_int(6));
    for (auto& s : samples) {
      s.resize(2 + rng.uniform_int(15));
      for (int& t : s) t = static_cast<int>(rng.uniform_int(model.vocab()));
    }
    constexpr std::size_t kCapacity = 40;
    const auto bca = pack::packed_loss_check(model, samples, kCapacity, true);
    worst_bca = std::max(worst_bca, bca.max_abs_diff);

    const auto leaky = pack::packed_loss_check(model, samples, kCapacity, false);
    const auto batch = pack::pack(samples, kCapacity, pack::PackPolicy::first_fit);
    double leak = 0.0;
    for (const auto& seq : batch.spans)
      for (const auto& span : seq)
        if (span.start > 0) {
          leak = std::max(leak, std::fabs(leaky.packed[span.sample_id] -
                                          leaky.isolated[span.sample_id]));
        }
    min_leak = std::min(min_leak, leak);
    ok = ok && bca.max_abs_diff <= 1e-9 && leak > 1e-6;
  }
  detail = fmt::format("BCA max |packed-isolated|={:.3g} (limit 1e-9); without BCA the smallest "
                       "per-set later-sample difference is {:.3g} (> 1e-6)",
                       worst_bca, min_leak);
  return ok;
}

bool check_reweighting(std::string& detail) {
  std::size_t checked = 0;
  std::size_t max_ratio = 0;
  bool ok = true;
  for (std::uint64_t b = 0; b < 50; ++b) {
    Rng rng(5000 + b);
    const std::size_t n = 2 + rng.uniform_int(23);
    std::vector<std::vector<int>> samples(n);
    std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      // Loss tokens range over 1..100, so lengths 2..101.
      const std::size_t len = i == 0 ? 2 : i == 1 ? 101 : 2 + rng.uniform_int(100);
      samples[i].assign(len, 1);
      lo = std::min(lo, len - 1);
      hi = std::max(hi, len - 1);
    }
    max_ratio = std::max(max_ratio, hi / lo);
    const auto batch = pack::pack(samples, 128, pack::PackPolicy::first_fit);
    std::vector<pack::Fraction> sums(n);
    for (std::size_t q = 0; q < batch.spans.size(); ++q) {
      for (const auto& span : batch.spans[q]) {
        for (std::size_t p = span.start; p < span.start + span.length; ++p) {
          sums[span.sample_id] = sums[span.sample_id] + batch.token_weights[q][p];
        }
      }
    }
    for (const auto& s : sums) {
      ++checked;
      // Cross-multiplied so the check does not lean on Fraction's reduction.
      ok = ok && s.num * static_cast<std::int64_t>(n) == s.den;
    }
  }
  detail = fmt::format("{} per-sample sums equal 1/n exactly; loss-token ratios up to {}:1",
                       checked, max_ratio);
  return ok && max_ratio >= 100;
}

// ---------------------------------------------------------------------------
// Decode

attn::ToyTransformer pattern_model(const std::string& pattern, bool share, std::uint64_t seed) {
  attn::ToyModelConfig cfg;
  cfg.n_layers = 8;
  cfg.pattern = attn::LayerPattern::parse(pattern, 4, share);
  cfg.seed = seed;
  return attn::ToyTransformer(cfg);
}

bool check_decode(std::string& detail) {
  double worst = 0.0;
  std::size_t runs = 0;
  for (const std::string pattern : {"3:1", "full"}) {
    for (bool share : {false, true}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto model = pattern_model(pattern, share, seed);
        Rng rng(seed * 7919 + 1);
        std::vector<int> tokens(32);
        for (int& t : tokens) t = static_cast<int>(rng.uniform_int(model.vocab()));
        auto cache = model.make_cache();
        for (std::size_t i = 0; i < tokens.size(); ++i) {
          const auto step = model.decode_step(cache, tokens[i]);
          // Oracle: whole-prefix forward, last row.
          const Matrix full = model.forward(std::span(tokens.data(), i + 1));
          for (std::size_t v = 0; v < step.size(); ++v)
            worst = std::max(worst, std::fabs(step[v] - full(i, v)));
        }
        ++runs;
      }
    }
  }
  detail = fmt::format("{} runs x 32 tokens, max |decode-forward|={:.3g} (limit 1e-9)", runs, worst);
  return worst <= 1e-9 && runs == 20;
}

// ---------------------------------------------------------------------------
// DPO

std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> out(n);
  for (int& t : out) t = static_cast<int>(rng.uniform_int(vocab));
  return out;
}

pref::PreferencePair random_pair(Rng& rng, std::size_t prompt_len, std::size_t vocab) {
  pref::PreferencePair p;
  p.prompt = random_tokens(rng, prompt_len, vocab);
  do {
    p.chosen = random_tokens(rng, 1 + rng.uniform_int(6), vocab);
    p.rejected = random_tokens(rng, 1 + rng.uniform_int(6), vocab);
  } while (p.chosen == p.rejected);
  return p;
}

// Naive scoring: one full forward per branch.
double naive_logprob(const attn::ToyTransformer& model, const std::vector<int>& prompt,
                     const std::vector<int>& response) {
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), response.begin(), response.end());
  const Matrix logits = model.forward(seq);
  double total = 0.0;
  for (std::size_t pos = std::max<std::size_t>(prompt.size(), 1); pos < seq.size(); ++pos) {
    const auto row = logits.row(pos - 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : row) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    total += row[static_cast<std::size_t>(seq[pos])] - mx - std::log(z);
  }
  return total;
}

bool check_dpo_equivalence(std::string& detail) {
  Rng rng(42);
  const auto model = pattern_model("3:1", true, 42);
  std::vector<pref::PreferencePair> pairs;
  for (int i = 0; i < 8; ++i) pairs.push_back(random_pair(rng, rng.uniform_int(7), model.vocab()));
  const auto cache = pref::build_logp_cache(model, pairs);
  pref::DpoTrainConfig tc;
  tc.steps = 5;
  const auto cached = pref::train_dpo(model, pairs, tc, pref::ReferenceSource::cached, &cache);
  const auto inline_ref = pref::train_dpo(model, pairs, tc, pref::ReferenceSource::inline_model);
  double traj_diff = 0.0;
  bool ok = cached.steps.size() == 5 && inline_ref.steps.size() == 5;
  for (std::size_t s = 0; ok && s < 5; ++s) {
    traj_diff = std::max(traj_diff, std::fabs(cached.steps[s].mean_loss - inline_ref.steps[s].mean_loss));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      traj_diff = std::max(traj_diff, std::fabs(cached.steps[s].margins[i] - inline_ref.steps[s].margins[i]));
    }
  }
  const bool moved = cached.steps.front().mean_loss != cached.steps.back().mean_loss;

  double prefix_diff = 0.0;
  bool savings_ok = true;
  std::size_t cases = 0;
  for (const std::string pattern : {"3:1", "full"}) {
    for (bool share : {false, true}) {
      const auto m = pattern_model(pattern, share, 7);
      for (std::size_t prompt_len : {0, 1, 7, 24}) {
        const auto pair = random_pair(rng, prompt_len, m.vocab());
        const auto shared = pref::score_pair_shared_prefix(m, pair);
        prefix_diff = std::max({prefix_diff,
                                std::fabs(shared.logps.chosen - naive_logprob(m, pair.prompt, pair.chosen)),
                                std::fabs(shared.logps.rejected -
                                          naive_logprob(m, pair.prompt, pair.rejected))});
        savings_ok = savings_ok && shared.recompute_savings == prompt_len;
        ++cases;
      }
    }
  }
  detail = fmt::format("cached vs inline 5-step trajectory max diff={:.3g} (limit 1e-10); shared "
                       "prefix vs naive max diff={:.3g} over {} cases (limit 1e-9); savings {}",
                       traj_diff, prefix_diff, cases,
                       savings_ok ? "= prompt length" : "MISMATCH");
  return ok && moved && traj_diff <= 1e-10 && prefix_diff <= 1e-9 && savings_ok;
}

// ---------------------------------------------------------------------------
// Determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool check_determinism(std::string& detail) {
  const fs::path dir = fs::temp_directory_path() /
                       fmt::format("ylab-determinism-{}", static_cast<std::uint64_t>(
                           std::chrono::steady_clock::now().time_since_epoch().count()));
  fs::create_directories(dir);
  {
    std::ofstream pack_in(dir / "samples.txt", std::ios::binary);
    Rng rng(3);
    for (int i = 0; i < 12; ++i) {
      const std::size_t len = 2 + rng.uniform_int(20);
      for (std::size_t j = 0; j < len; ++j) pack_in << (j ? " " : "") << rng.uniform_int(32);
      pack_in << '\n';
    }
    std::ofstream pairs_in(dir / "pairs.jsonl", std::ios::binary);
    for (int i = 0; i < 6; ++i) {
      const auto p = random_pair(rng, rng.uniform_int(8), 32);
      auto list = [](const std::vector<int>& v) {
        std::string s = "[";
        for (std::size_t j = 0; j < v.size(); ++j) s += (j ? "," : "") + std::to_string(v[j]);
        return s + "]";
      };
      pairs_in << "{\"prompt\":" << list(p.prompt) << ",\"chosen\":" << list(p.chosen)
               << ",\"rejected\":" << list(p.rejected) << "}\n";
    }
  }
  const std::string samples = (dir / "samples.txt").string();
  const std::string pairs = (dir / "pairs.jsonl").string();
  // The router commands run a shortened schedule; byte identity does not
  // depend on length.
  const std::vector<std::vector<std::string>> commands = {
      {"route-balance", "--router.steps", "300"},
      {"dispatch-sim", "--router.steps", "300", "--dispatch.held_out_tokens", "1024", "--jobs", "3"},
      {"kv-memory", "--window", "1024,4096", "--pattern", "3:1,full,SF"},
      {"decode-check"},
      {"pack", "--input", samples},
      {"dpo-step", "--input", pairs},
      {"dpo-cache", "--input", pairs},
      {"gradcheck"},
  };
  std::vector<std::string> bad;
  for (const auto& base : commands) {
    std::string first;
    for (int rep = 0; rep < 2; ++rep) {
      auto args = base;
      const fs::path out = dir / fmt::format("{}-{}.out", base[0], rep);
      args.insert(args.end(), {"--seed", "42", "--output", out.string()});
      std::ostringstream o, e;
      const int rc = run_main(args, o, e);
      const std::string bytes = slurp(out);
      if (rc != 0 || bytes.empty()) {
        bad.push_back(base[0] + " (exit " + std::to_string(rc) + ")");
        break;
      }
      if (rep == 0) {
        first = bytes;
      } else if (bytes != first) {
        bad.push_back(base[0]);
      }
    }
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  if (bad.empty()) {
    detail = fmt::format("{} subcommands byte-identical across two runs", commands.size());
    return true;
  }
  detail = "differs or failed:";
  for (const auto& b : bad) detail += " " + b;
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------

GradcheckSummary gradcheck_aux_loss(std::size_t instances, double step, std::uint64_t seed) {
  GradcheckSummary out{"aux_loss", instances, 0.0};
  const auto topo = moe::ExpertTopology::make(2, 2, 2, 1);
  const moe::LossCoefficients coeffs{1e-6, 1e-4, 1e-3};
  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng rng(seed * 1000003 + inst);
    const std::size_t k = 1 + inst % 2;
    const std::size_t tokens = 24;
    const std::size_t n = topo.n_experts;
    Matrix logits = rng.normal_matrix(tokens, n, 2.0);
    auto t = topo;
    t.top_k = k;
    const auto gate = moe::gate_from_logits(logits, k);
    const auto aux = moe::combined_aux_loss(gate, t, coeffs);

    // Frozen at the evaluation point: each token's argmax and the resulting
    // per-scope token fractions.
    std::vector<std::size_t> top(tokens);
    for (std::size_t r = 0; r < tokens; ++r) {
      const auto row = logits.row(r);
      top[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    struct Unit {
      double alpha;
      std::size_t first, width;
      std::vector<std::size_t> members;
      std::vector<double> f;
    };
    std::vector<Unit> units;
    auto add_units = [&](double alpha, std::size_t width) {
      for (std::size_t first = 0; first < n; first += width) {
        Unit u{alpha, first, width, {}, std::vector<double>(width, 0.0)};
        for (std::size_t r = 0; r < tokens; ++r)
          if (top[r] >= first && top[r] < first + width) u.members.push_back(r);
        for (std::size_t r : u.members) u.f[top[r] - first] += 1.0 / u.members.size();
        units.push_back(std::move(u));
      }
    };
    add_units(coeffs.alpha_st, n);
    add_units(coeffs.alpha_ep, topo.experts_per_group);
    add_units(coeffs.alpha_pep, topo.experts_per_partition);

    auto surrogate = [&](std::span<const double> z) {
      double loss = 0.0;
      for (const auto& u : units) {
        if (u.members.empty()) continue;
        std::vector<double> pbar(u.width, 0.0);
        for (std::size_t r : u.members) {
          const double* row = z.data() + r * n;
          const double mx = *std::max_element(row, row + n);
          double zsum = 0.0;
          for (std::size_t j = 0; j < n; ++j) zsum += std::exp(row[j] - mx);
          for (std::size_t i = 0; i < u.width; ++i)
            pbar[i] += std::exp(row[u.first + i] - mx) / zsum / u.members.size();
        }
        for (std::size_t i = 0; i < u.width; ++i) loss += u.alpha * u.width * u.f[i] * pbar[i];
      }
      return loss;
    };
    const double value_err = relative_error(surrogate(logits.data()), aux.total);
    const auto gc = grad_check(surrogate, aux.grad_logits.data(), logits.data(), step);
    out.max_rel_error = std::max({out.max_rel_error, gc.max_rel_error, value_err});
  }
  return out;
}

GradcheckSummary gradcheck_dpo(std::size_t instances, double step, std::uint64_t seed) {
  GradcheckSummary out{"dpo_loss", instances, 0.0};
  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng rng(seed * 2000003 + inst);
    const pref::DpoConfig cfg{rng.uniform(0.05, 1.0)};
    const pref::LogProbPair ref{-rng.uniform(1.0, 30.0), -rng.uniform(1.0, 30.0)};
    const std::vector<double> pol = {-rng.uniform(1.0, 30.0), -rng.uniform(1.0, 30.0)};
    auto f = [&](std::span<const double> x) {
      return std::log1p(std::exp(-cfg.beta * ((x[0] - ref.chosen) - (x[1] - ref.rejected))));
    };
    const auto l = pref::dpo_loss({pol[0], pol[1]}, ref, cfg);
    const std::vector<double> analytic = {l.grad_chosen, l.grad_rejected};
    const auto gc = grad_check(f, analytic, pol, step);
    out.max_rel_error = std::max({out.max_rel_error, gc.max_rel_error,
                                  relative_error(f(pol), l.loss)});
  }
  return out;
}

GradcheckSummary gradcheck_bt(std::size_t instances, double step, std::uint64_t seed) {
  GradcheckSummary out{"bt_loss", instances, 0.0};
  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng rng(seed * 3000017 + inst);
    const std::vector<double> r = {rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)};
    auto f = [](std::span<const double> x) { return std::log1p(std::exp(-(x[0] - x[1]))); };
    const auto l = pref::bt_loss(r[0], r[1]);
    const std::vector<double> analytic = {l.grad_chosen, l.grad_rejected};
    const auto gc = grad_check(f, analytic, r, step);
    out.max_rel_error = std::max({out.max_rel_error, gc.max_rel_error,
                                  relative_error(f(r), l.loss)});
  }
  return out;
}

std::string format_result(const CriterionResult& r) {
  return fmt::format("{} [{:>2}] {}: {} ({:.2f} s{})", r.pass ? "PASS" : "FAIL", r.id, r.title,
                     r.detail, r.seconds,
                     r.time_limit > 0 ? fmt::format(", limit {:g} s", r.time_limit) : "");
}

std::vector<Criterion> acceptance_criteria() {
  return {
      {1, "kv memory reduction", 5, check_kv_reduction},
      {2, "half cache for shared full layers", 1, check_half_cache},
      {3, "balance loss minimum at uniform routing", 30, check_loss_minimum},
      {4, "gradient correctness", 10, check_gradients},
      {5, "balance convergence", 60, check_balance_convergence},
      {6, "segmentation conservation", 1, check_segmentation},
      {7, "packed loss equivalence", 10, check_packed_loss},
      {8, "reweighting exactness", 1, check_reweighting},
      {9, "decode cache oracle", 10, check_decode},
      {10, "dpo optimization equivalence", 10, check_dpo_equivalence},
      {11, "cli determinism", 0, check_determinism},
  };
}

std::vector<CriterionResult> run_acceptance(std::ostream& out) {
  std::vector<CriterionResult> results;
  for (const auto& c : acceptance_criteria()) {
    CriterionResult r;
    r.id = c.id;
    r.title = c.title;
    r.time_limit = c.time_limit;
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      ok = c.check(r.detail);
    } catch (const std::exception& e) {
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.pass = ok && (c.time_limit <= 0 || r.seconds < c.time_limit);
    if (ok && !r.pass) r.detail += "; over time limit";
    out << format_result(r) << '\n' << std::flush;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace ylab::cli
