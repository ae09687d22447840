// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab_tools/run_config.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <fstream>
#include <sstream>

namespace ylab::cli {

namespace {

std::vector<KeySpec> router_keys() {
  return {
      {"router.groups", "2", "expert-parallel groups"},
      {"router.partitions_per_group", "2", "partitions per group"},
      {"router.experts_per_partition", "2", "experts per partition"},
      {"router.top_k", "1", "experts selected per token"},
      {"router.alpha_st", "1e-6", "global balance coefficient"},
      {"router.alpha_ep", "1e-4", "group balance coefficient"},
      {"router.alpha_pep", "1e-3", "partition balance coefficient"},
      {"router.dim", "16", "token feature dimension"},
      {"router.tokens_per_step", "512", "tokens per training step"},
      {"router.steps", "2000", "gradient steps"},
      {"router.lr", "100", "learning rate"},
      {"router.init", "adversarial", "gate init: uniform, adversarial or random"},
      {"router.feature_scale", "1", "gate init feature weight"},
      {"router.adversarial_bias", "6", "bias on expert 0 for adversarial init"},
  };
}

std::vector<KeySpec> model_keys(bool with_pattern) {
  std::vector<KeySpec> keys = {
      {"model.vocab", "32", "vocabulary size"},
      {"model.dim", "16", "model width"},
      {"model.layers", "8", "attention layers"},
      {"model.window", "4", "sliding window in tokens"},
      {"model.rope_base", "10000", "RoPE base"},
      {"model.init_scale", "0.5", "projection init scale"},
  };
  if (with_pattern) {
    keys.push_back({"model.pattern", "3:1", "layer pattern: 3:1, full, or letters such as SSSF"});
    keys.push_back({"model.share", "false", "share K/V between consecutive full layers", true});
  }
  return keys;
}

template <typename... Parts>
std::vector<KeySpec> join(Parts... parts) {
  std::vector<KeySpec> out;
  (out.insert(out.end(), parts.begin(), parts.end()), ...);
  return out;
}

std::vector<SubcommandSpec> build_specs() {
  std::vector<SubcommandSpec> s;
  s.push_back({"route-balance", "train a toy gate with the balance losses; CSV trajectory",
               join(router_keys(),
                    std::vector<KeySpec>{{"router.log_every", "100", "trajectory stride"}})});
  s.push_back({"dispatch-sim", "compare load-balance regimes on a simulated dispatch",
               join(router_keys(), std::vector<KeySpec>{
                                       {"dispatch.held_out_tokens", "4096", "held-out tokens"},
                                       {"dispatch.source_ranks", "4", "source ranks"},
                                       {"dispatch.variants", "paper,st_only,zero",
                                        "regimes: paper, st_only, zero"},
                                   })});
  s.push_back({"kv-memory", "KV-cache memory sweep",
               {
                   {"window", "4096", "sliding windows (comma list)"},
                   {"context", "65536", "context lengths (comma list)"},
                   {"pattern", "3:1,full", "layer patterns (comma list)"},
                   {"share", "false", "share K/V between consecutive full layers", true},
                   {"layers", "32", "layers"},
                   {"heads", "8", "KV heads"},
                   {"head_dim", "128", "head dimension"},
                   {"bytes_per_element", "2", "bytes per cached element"},
               }});
  s.push_back({"decode-check", "incremental decode vs whole-sequence forward",
               join(model_keys(false), std::vector<KeySpec>{
                                      {"decode.tokens", "32", "tokens per run"},
                                      {"decode.seeds", "5", "seeds per pattern"},
                                      {"decode.tolerance", "1e-9", "max abs logit difference"},
                                  })});
  s.push_back({"pack", "pack token lines into fixed-capacity sequences",
               {
                   {"input", "", "file of whitespace-separated token lines"},
                   {"pack.capacity", "64", "tokens per packed sequence"},
                   {"pack.policy", "first_fit", "first_fit or greedy_descending"},
               }});
  s.push_back({"dpo-step", "DPO steps on an output-bias policy; CSV per pair",
               join(std::vector<KeySpec>{{"input", "", "JSON-lines file of preference pairs"}},
                    model_keys(true),
                    std::vector<KeySpec>{
                        {"dpo.beta", "0.1", "DPO temperature"},
                        {"dpo.lr", "1", "learning rate"},
                        {"dpo.steps", "5", "steps"},
                        {"dpo.reference", "cached", "reference source: cached or inline"},
                    })});
  s.push_back({"dpo-cache", "write the reference log-prob cache",
               join(std::vector<KeySpec>{{"input", "", "JSON-lines file of preference pairs"}},
                    model_keys(true),
                    std::vector<KeySpec>{{"dpo.snapshot", "0", "dataset snapshot id"}})});
  s.push_back({"gradcheck", "analytic vs central-difference gradients",
               {
                   {"gradcheck.instances", "20", "seeded instances per loss"},
                   {"gradcheck.step", "3e-4", "central-difference step"},
                   {"gradcheck.tolerance", "1e-6", "max relative error"},
               }});
  s.push_back({"acceptance", "run the acceptance suite", {}});
  return s;
}

const std::vector<KeySpec>& shared_keys() {
  static const std::vector<KeySpec> keys = {
      {"seed", "42", "RNG seed (falls back to YLAB_SEED)"},
      {"output", "", "output file; stdout when unset"},
      {"format", "csv", "csv or json"},
      {"jobs", "1", "parallel sweep points"},
  };
  return keys;
}

std::string shown_default(const KeySpec& k) {
  return " (default: " + (k.default_value.empty() ? std::string("none") : k.default_value) + ")";
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::optional<bool> parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  return std::nullopt;
}

}  // namespace

std::uint64_t parse_unsigned(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    throw UsageError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

const std::vector<SubcommandSpec>& subcommands() {
  static const std::vector<SubcommandSpec> specs = build_specs();
  return specs;
}

const SubcommandSpec* find_subcommand(std::string_view name) {
  for (const auto& s : subcommands())
    if (s.name == name) return &s;
  return nullptr;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) throw UsageError("key '" + key + "' is not valid for " + subcommand);
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  std::istringstream in(v);
  in.imbue(std::locale::classic());
  double out = 0.0;
  if (!(in >> out) || !in.eof()) {
    throw UsageError("key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  return static_cast<std::size_t>(parse_unsigned(key, get(key)));
}

std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_unsigned(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  const auto b = parse_bool(v);
  if (!b) throw UsageError("key '" + key + "': expected true or false, got '" + v + "'");
  return *b;
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::map<std::string, std::string> parse_flat_config(std::string_view text,
                                                     std::string_view source) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(stripped.substr(0, eq));
    if (eq == std::string::npos || key.empty() ||
        key.find_first_of(" \t") != std::string::npos) {
      throw UsageError(std::string(source) + ":" + std::to_string(line_no) +
                       ": malformed line, expected 'key = value'");
    }
    out[key] = trim(stripped.substr(eq + 1));
  }
  return out;
}

std::string valid_keys_message(const SubcommandSpec& spec) {
  std::string msg = "valid keys for " + spec.name + ":\n";
  for (const auto& k : shared_keys()) msg += "  " + k.name + shown_default(k) + "\n";
  msg += "  config (flat key = value file)\n";
  for (const auto& k : spec.keys) msg += "  " + k.name + shown_default(k) + "\n";
  return msg;
}

ParseResult parse_config(const std::vector<std::string>& args, const char* env_seed) {
  ParseResult result;
  CLI::App app{"ylab: desk-scale experiments on MoE routing, KV caches, packing and DPO", "ylab"};
  app.require_subcommand(1, 1);

  struct Slots {
    std::map<std::string, std::string> values;
    std::map<std::string, bool> flags;
    std::string config_path;
  };
  std::map<std::string, Slots> slots;
  for (const auto& spec : subcommands()) {
    auto* sc = app.add_subcommand(spec.name, spec.summary);
    Slots& sl = slots[spec.name];
    sc->add_option("--config", sl.config_path, "flat key = value file");
    for (const auto& k : shared_keys()) {
      sc->add_option("--" + k.name, sl.values[k.name], k.help + shown_default(k));
    }
    for (const auto& k : spec.keys) {
      const std::string help = k.help + shown_default(k);
      if (k.is_flag) {
        sc->add_flag("--" + k.name, sl.flags[k.name], help);
      } else {
        sc->add_option("--" + k.name, sl.values[k.name], help);
      }
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
    result.text = sub ? sub->help("ylab") : app.help();
    result.exit_code = 0;
    return result;
  } catch (const CLI::ExtrasError& e) {
    const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
    result.text = std::string("error: ") + e.what() + "\n";
    if (sub) result.text += valid_keys_message(*find_subcommand(sub->get_name()));
    result.exit_code = 2;
    return result;
  } catch (const CLI::ParseError& e) {
    result.text = std::string("error: ") + e.what() + "\nsubcommands:";
    for (const auto& s : subcommands()) result.text += " " + s.name;
    result.text += "\n";
    result.exit_code = 2;
    return result;
  }

  const auto* sub = app.get_subcommands().front();
  const SubcommandSpec& spec = *find_subcommand(sub->get_name());
  Slots& sl = slots[spec.name];
  RunConfig& cfg = result.config;
  cfg.subcommand = spec.name;

  try {
    std::map<std::string, std::string> file;
    if (!sl.config_path.empty()) {
      std::ifstream in(sl.config_path, std::ios::binary);
      if (!in) throw UsageError("cannot read config file " + sl.config_path);
      std::stringstream buf;
      buf << in.rdbuf();
      file = parse_flat_config(buf.str(), sl.config_path);
      for (const auto& [key, value] : file) {
        bool known = false;
        for (const auto& k : shared_keys()) known = known || k.name == key;
        for (const auto& k : spec.keys) known = known || k.name == key;
        if (!known) {
          throw UsageError(sl.config_path + ": unknown key '" + key + "'\n" +
                           valid_keys_message(spec));
        }
      }
    }

    auto resolve = [&](const std::string& name, const std::string& def) -> std::optional<std::string> {
      if (sub->count("--" + name) > 0) {
        if (sl.flags.count(name)) return sl.flags[name] ? "true" : "false";
        return sl.values[name];
      }
      if (const auto it = file.find(name); it != file.end()) return it->second;
      if (def.empty()) return std::nullopt;
      return def;
    };

    for (const auto& k : spec.keys) cfg.values[k.name] = resolve(k.name, k.default_value).value_or("");
    for (const auto& k : spec.keys) {
      if (k.is_flag && !parse_bool(cfg.values[k.name])) {
        throw UsageError("key '" + k.name + "': expected true or false, got '" +
                         cfg.values[k.name] + "'");
      }
    }

    if (sub->count("--seed") > 0) {
      cfg.seed = parse_unsigned("seed", sl.values["seed"]);
    } else if (file.count("seed")) {
      cfg.seed = parse_unsigned("seed", file["seed"]);
    } else if (env_seed && *env_seed) {
      cfg.seed = parse_unsigned("YLAB_SEED", env_seed);
    } else {
      cfg.seed = 42;
    }

    if (auto out = resolve("output", ""); out && !out->empty()) cfg.output_path = *out;
    const std::string format = resolve("format", "csv").value();
    if (format == "csv") {
      cfg.format = OutputFormat::csv;
    } else if (format == "json") {
      cfg.format = OutputFormat::json;
    } else {
      throw UsageError("format must be csv or json, got '" + format + "'");
    }
    cfg.jobs = static_cast<std::size_t>(parse_unsigned("jobs", resolve("jobs", "1").value()));
    if (cfg.jobs < 1) throw UsageError("jobs must be >= 1");
  } catch (const UsageError& e) {
    result.text = std::string("error: ") + e.what() + "\n";
    result.exit_code = 2;
  }
  return result;
}

}  // namespace ylab::cli
