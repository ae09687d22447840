// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab_tools/commands.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "ylab/dispatch_sim.hpp"
#include "ylab/moe_router.hpp"
#include "ylab/packing.hpp"
#include "ylab/preference.hpp"
#include "ylab/toy_model.hpp"
#include "ylab_tools/acceptance.hpp"
#include "ylab_tools/table.hpp"

namespace ylab::cli {

namespace {

moe::ExpertTopology topology_from(const RunConfig& cfg) {
  return moe::ExpertTopology::make(cfg.get_size("router.groups"),
                                   cfg.get_size("router.partitions_per_group"),
                                   cfg.get_size("router.experts_per_partition"),
                                   cfg.get_size("router.top_k"));
}

moe::LossCoefficients coeffs_from(const RunConfig& cfg) {
  moe::LossCoefficients c{cfg.get_double("router.alpha_st"), cfg.get_double("router.alpha_ep"),
                          cfg.get_double("router.alpha_pep")};
  c.validate();
  return c;
}

moe::GateTrainConfig train_config_from(const RunConfig& cfg) {
  moe::GateTrainConfig t;
  t.dim = cfg.get_size("router.dim");
  t.tokens_per_step = cfg.get_size("router.tokens_per_step");
  t.steps = cfg.get_size("router.steps");
  t.lr = cfg.get_double("router.lr");
  t.init = moe::parse_gate_init(cfg.get("router.init"));
  t.feature_scale = cfg.get_double("router.feature_scale");
  t.adversarial_bias = cfg.get_double("router.adversarial_bias");
  t.seed = cfg.seed;
  return t;
}

attn::ToyModelConfig model_config_from(const RunConfig& cfg, const std::string& pattern,
                                       bool share, std::uint64_t seed) {
  attn::ToyModelConfig m;
  m.vocab = cfg.get_size("model.vocab");
  m.dim = cfg.get_size("model.dim");
  m.n_layers = cfg.get_size("model.layers");
  m.pattern = attn::LayerPattern::parse(pattern, cfg.get_size("model.window"), share);
  m.rope_base = cfg.get_double("model.rope_base");
  m.init_scale = cfg.get_double("model.init_scale");
  m.seed = seed;
  return m;
}

attn::ToyModelConfig model_config_from(const RunConfig& cfg) {
  return model_config_from(cfg, cfg.get("model.pattern"), cfg.get_bool("model.share"), cfg.seed);
}

std::string read_input(const RunConfig& cfg) {
  const std::string& path = cfg.get("input");
  if (path.empty()) throw UsageError(cfg.subcommand + " needs --input");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read input file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<int> json_tokens(const nlohmann::json& v, const std::string& where) {
  if (!v.is_array()) throw UsageError(where + ": expected an integer list");
  std::vector<int> out;
  for (const auto& t : v) {
    if (!t.is_number_integer()) throw UsageError(where + ": expected an integer list");
    out.push_back(t.get<int>());
  }
  return out;
}

std::vector<pref::PreferencePair> read_pairs(const RunConfig& cfg) {
  const std::string text = read_input(cfg);
  std::vector<pref::PreferencePair> pairs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = cfg.get("input") + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw UsageError(where + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("chosen") || !rec.contains("rejected")) {
      throw UsageError(where + ": expected an object with prompt, chosen and rejected");
    }
    pref::PreferencePair p;
    if (rec.contains("prompt")) p.prompt = json_tokens(rec["prompt"], where + " prompt");
    p.chosen = json_tokens(rec["chosen"], where + " chosen");
    p.rejected = json_tokens(rec["rejected"], where + " rejected");
    try {
      p.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(where + ": " + e.what());
    }
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw UsageError(cfg.get("input") + ": no preference pairs");
  return pairs;
}

int route_balance(const RunConfig& cfg, std::ostream& out) {
  const auto topo = topology_from(cfg);
  const auto result = moe::train_gate(topo, coeffs_from(cfg), train_config_from(cfg));
  const std::size_t every = std::max<std::size_t>(1, cfg.get_size("router.log_every"));
  Table t{{"step", "loss", "max_f", "min_f", "spread"}, {}};
  for (const auto& p : result.trajectory) {
    if (p.step % every != 0 && p.step + 1 != result.trajectory.size()) continue;
    t.add({static_cast<std::uint64_t>(p.step), p.loss, p.max_f, p.min_f, p.max_f - p.min_f});
  }
  write_table(out, t, cfg.format);
  return kExitOk;
}

int dispatch_sim(const RunConfig& cfg, std::ostream& out) {
  const auto topo = topology_from(cfg);
  const auto configured = coeffs_from(cfg);
  std::vector<dispatch::RegimeVariant> variants;
  for (const auto& name : cfg.get_list("dispatch.variants")) {
    if (name == "paper") {
      variants.push_back({name, configured});
    } else if (name == "st_only") {
      variants.push_back({name, {configured.alpha_st, 0.0, 0.0}});
    } else if (name == "zero") {
      variants.push_back({name, {0.0, 0.0, 0.0}});
    } else {
      throw UsageError("unknown regime '" + name + "' (expected paper, st_only or zero)");
    }
  }
  dispatch::RegimeConfig rc;
  rc.train = train_config_from(cfg);
  rc.held_out_tokens = cfg.get_size("dispatch.held_out_tokens");
  rc.source_ranks = cfg.get_size("dispatch.source_ranks");
  rc.jobs = cfg.jobs;
  const auto results = dispatch::compare_regimes(topo, variants, rc);
  Table t{{"variant", "scope", "max_load", "mean_load", "stddev", "imbalance_ratio"}, {}};
  for (const auto& r : results) {
    for (const auto* rep : {&r.group, &r.partition}) {
      t.add({r.variant, dispatch::to_string(rep->scope), rep->max_load, rep->mean_load, rep->stddev,
             rep->imbalance_ratio});
    }
  }
  write_table(out, t, cfg.format);
  return kExitOk;
}

int kv_memory(const RunConfig& cfg, std::ostream& out) {
  const bool share = cfg.get_bool("share");
  const std::size_t layers = cfg.get_size("layers");
  Table t{{"pattern", "window", "context", "layers", "share", "cached_tokens", "total_bytes",
           "baseline_bytes", "reduction_pct"},
          {}};
  for (const auto& pattern_name : cfg.get_list("pattern")) {
    for (const auto& w : cfg.get_list("window")) {
      for (const auto& c : cfg.get_list("context")) {
        const auto pattern =
            attn::LayerPattern::parse(pattern_name, parse_unsigned("window", w), share);
        attn::CacheLayoutParams params;
        params.context_len = parse_unsigned("context", c);
        params.n_heads = cfg.get_size("heads");
        params.head_dim = cfg.get_size("head_dim");
        params.bytes_per_element = cfg.get_size("bytes_per_element");
        const auto layout = attn::memory_account(pattern, layers, params);
        t.add({pattern.name(), static_cast<std::uint64_t>(pattern.window), layout.context_len,
               static_cast<std::uint64_t>(layers), share, layout.cached_tokens, layout.total_bytes,
               layout.baseline_bytes, layout.reduction * 100.0});
      }
    }
  }
  write_table(out, t, cfg.format);
  return kExitOk;
}

int decode_check(const RunConfig& cfg, std::ostream& out) {
  const std::size_t n_tokens = cfg.get_size("decode.tokens");
  const std::size_t seeds = cfg.get_size("decode.seeds");
  const double tol = cfg.get_double("decode.tolerance");
  Table t{{"pattern", "share", "seed", "tokens", "max_abs_diff", "pass"}, {}};
  bool all = true;
  for (const std::string pattern : {"3:1", "full"}) {
    for (const bool share : {false, true}) {
      for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t seed = cfg.seed + s;
        const attn::ToyTransformer model(model_config_from(cfg, pattern, share, seed));
        Rng rng(seed ^ 0x5DEECE66DULL);
        std::vector<int> tokens(n_tokens);
        for (int& tok : tokens) tok = static_cast<int>(rng.uniform_int(model.vocab()));
        const Matrix full = model.forward(tokens);
        auto cache = model.make_cache();
        double worst = 0.0;
        for (std::size_t i = 0; i < n_tokens; ++i) {
          const auto logits = model.decode_step(cache, tokens[i]);
          for (std::size_t v = 0; v < logits.size(); ++v) {
            worst = std::max(worst, std::fabs(logits[v] - full(i, v)));
          }
        }
        const bool pass = worst <= tol;
        all = all && pass;
        t.add({model.config().pattern.name(), share, seed, static_cast<std::uint64_t>(n_tokens),
               worst, pass});
      }
    }
  }
  write_table(out, t, cfg.format);
  return all ? kExitOk : kExitAssertion;
}

int pack_cmd(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::string text = read_input(cfg);
  std::vector<std::vector<int>> samples;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<int> tokens;
    std::string word;
    while (ls >> word) {
      std::size_t used = 0;
      long v = -1;
      try {
        v = std::stol(word, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != word.size() || v < 0 || v > std::numeric_limits<int>::max()) {
        throw UsageError(cfg.get("input") + ":" + std::to_string(line_no) + ": bad token '" +
                         word + "'");
      }
      tokens.push_back(static_cast<int>(v));
    }
    if (!tokens.empty()) samples.push_back(std::move(tokens));
  }
  if (samples.empty()) throw UsageError(cfg.get("input") + ": no samples");

  const auto batch = pack::pack(samples, cfg.get_size("pack.capacity"),
                                pack::parse_policy(cfg.get("pack.policy")));
  Table t{{"sequence", "sample_id", "start", "length", "weight"}, {}};
  for (std::size_t q = 0; q < batch.spans.size(); ++q) {
    for (const auto& s : batch.spans[q]) {
      const auto& w = batch.token_weights[q][s.start + s.length - 1];
      t.add({static_cast<std::uint64_t>(q), static_cast<std::uint64_t>(s.sample_id),
             static_cast<std::uint64_t>(s.start), static_cast<std::uint64_t>(s.length),
             fmt::format("{}/{}", w.num, w.den)});
    }
  }
  write_table(out, t, cfg.format);
  err << fmt::format("utilization {:.4f}% ({} tokens in {} sequences of {})\n",
                     batch.utilization() * 100.0, batch.total_tokens(), batch.sequences.size(),
                     batch.capacity);
  return kExitOk;
}

int dpo_step(const RunConfig& cfg, std::ostream& out) {
  const auto pairs = read_pairs(cfg);
  const attn::ToyTransformer model(model_config_from(cfg));
  pref::DpoTrainConfig tc;
  tc.dpo.beta = cfg.get_double("dpo.beta");
  tc.lr = cfg.get_double("dpo.lr");
  tc.steps = cfg.get_size("dpo.steps");
  const std::string& ref = cfg.get("dpo.reference");
  pref::DpoTrainResult result;
  if (ref == "cached") {
    const auto cache = pref::build_logp_cache(model, pairs);
    result = pref::train_dpo(model, pairs, tc, pref::ReferenceSource::cached, &cache);
  } else if (ref == "inline") {
    result = pref::train_dpo(model, pairs, tc, pref::ReferenceSource::inline_model);
  } else {
    throw UsageError("dpo.reference must be cached or inline, got '" + ref + "'");
  }
  Table t{{"step", "pair_id", "margin", "loss"}, {}};
  for (const auto& s : result.steps) {
    for (std::size_t i = 0; i < s.losses.size(); ++i) {
      t.add({static_cast<std::uint64_t>(s.step), static_cast<std::uint64_t>(i), s.margins[i],
             s.losses[i]});
    }
  }
  write_table(out, t, cfg.format);
  return kExitOk;
}

int dpo_cache(const RunConfig& cfg, std::ostream& err) {
  if (!cfg.output_path) throw UsageError("dpo-cache writes a binary file and needs --output");
  const auto pairs = read_pairs(cfg);
  const attn::ToyTransformer model(model_config_from(cfg));
  const auto cache = pref::build_logp_cache(model, pairs, cfg.get_u64("dpo.snapshot"));
  std::ofstream file(*cfg.output_path, std::ios::binary);
  if (!file) throw UsageError("cannot write " + *cfg.output_path);
  pref::write_logp_cache(file, cache);
  err << fmt::format("wrote {} records for {} pairs\n", cache.size(), pairs.size());
  return kExitOk;
}

int gradcheck(const RunConfig& cfg, std::ostream& out) {
  const std::size_t n = cfg.get_size("gradcheck.instances");
  const double step = cfg.get_double("gradcheck.step");
  const double tol = cfg.get_double("gradcheck.tolerance");
  Table t{{"target", "instances", "max_rel_error", "tolerance", "pass"}, {}};
  bool all = true;
  for (const auto& s : {gradcheck_aux_loss(n, step, cfg.seed), gradcheck_dpo(n, step, cfg.seed),
                        gradcheck_bt(n, step, cfg.seed)}) {
    const bool pass = s.max_rel_error < tol;
    all = all && pass;
    t.add({s.target, static_cast<std::uint64_t>(s.instances), s.max_rel_error, tol, pass});
  }
  write_table(out, t, cfg.format);
  return all ? kExitOk : kExitAssertion;
}

int acceptance(std::ostream& out) {
  const auto results = run_acceptance(out);
  for (const auto& r : results)
    if (!r.pass) return kExitAssertion;
  return kExitOk;
}

int dispatch_command(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::string& sc = cfg.subcommand;
  if (sc == "route-balance") return route_balance(cfg, out);
  if (sc == "dispatch-sim") return dispatch_sim(cfg, out);
  if (sc == "kv-memory") return kv_memory(cfg, out);
  if (sc == "decode-check") return decode_check(cfg, out);
  if (sc == "pack") return pack_cmd(cfg, out, err);
  if (sc == "dpo-step") return dpo_step(cfg, out);
  if (sc == "dpo-cache") return dpo_cache(cfg, err);
  if (sc == "gradcheck") return gradcheck(cfg, out);
  if (sc == "acceptance") return acceptance(out);
  throw UsageError("unknown subcommand '" + sc + "'");
}

}  // namespace

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    if (config.output_path && config.subcommand != "dpo-cache") {
      std::ofstream file(*config.output_path, std::ios::binary);
      if (!file) throw UsageError("cannot write " + *config.output_path);
      return dispatch_command(config, file, err);
    }
    return dispatch_command(config, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitAssertion;
  }
}

int run_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const ParseResult parsed = parse_config(args, std::getenv("YLAB_SEED"));
  if (parsed.exit_code) {
    (*parsed.exit_code == 0 ? out : err) << parsed.text;
    return *parsed.exit_code;
  }
  return run(parsed.config, out, err);
}

}  // namespace ylab::cli
