// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ylab_tools/run_config.hpp"

namespace ylab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitUsage = 2;

/// Runs a parsed subcommand. Results go to config.output_path when set,
/// otherwise to `out`; diagnostics and summaries go to `err`.
int run(const RunConfig& config, std::ostream& out, std::ostream& err);

/// parse_config followed by run; what main() does.
int run_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ylab::cli
