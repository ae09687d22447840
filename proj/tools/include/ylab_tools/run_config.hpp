// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ylab::cli {

enum class OutputFormat { csv, json };

/// One accepted dotted-path key of a subcommand.
struct KeySpec {
  std::string name;
  std::string default_value;
  std::string help;
  bool is_flag = false;  // boolean switch, takes no value on the command line
};

struct SubcommandSpec {
  std::string name;
  std::string summary;
  std::vector<KeySpec> keys;
};

/// Every subcommand with its module keys. The shared keys (seed, output,
/// format, jobs, config) are accepted by all of them and are not listed here.
const std::vector<SubcommandSpec>& subcommands();
const SubcommandSpec* find_subcommand(std::string_view name);

struct RunConfig {
  std::string subcommand;
  std::uint64_t seed = 42;
  std::map<std::string, std::string> values;  // every module key, resolved
  std::optional<std::string> output_path;
  OutputFormat format = OutputFormat::csv;
  std::size_t jobs = 1;

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// Comma-separated list, empty items dropped.
  std::vector<std::string> get_list(const std::string& key) const;
};

/// Thrown for anything that maps to exit code 2.
class UsageError : public std::exception {
 public:
  explicit UsageError(std::string message) : message_(std::move(message)) {}
  const char* what() const noexcept override { return message_.c_str(); }

 private:
  std::string message_;
};

struct ParseResult {
  /// Set when the caller should stop with this exit code (help or usage
  /// error) after printing `text`.
  std::optional<int> exit_code;
  std::string text;
  RunConfig config;
};

/// Resolves values in order: command-line flag, then config file, then the
/// default. The seed additionally falls back to `env_seed` (YLAB_SEED) before
/// the default of 42.
ParseResult parse_config(const std::vector<std::string>& args, const char* env_seed);

/// Parses flat `key = value` text. `#` starts a comment. Throws UsageError
/// naming `source` and the line number for malformed lines.
std::map<std::string, std::string> parse_flat_config(std::string_view text,
                                                     std::string_view source);

std::string valid_keys_message(const SubcommandSpec& spec);

/// Throws UsageError naming `key` unless `v` is a plain non-negative integer.
std::uint64_t parse_unsigned(const std::string& key, const std::string& v);

}  // namespace ylab::cli
