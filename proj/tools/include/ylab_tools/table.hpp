// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "ylab_tools/run_config.hpp"

namespace ylab::cli {

using Cell = std::variant<std::string, std::int64_t, std::uint64_t, double, bool>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row);
};

/// Doubles use up to 12 significant digits ("%.12g"); lines end in '\n' and
/// the header row is always written.
void write_csv(std::ostream& out, const Table& table);
/// A JSON array of row objects keyed by column name.
void write_json(std::ostream& out, const Table& table);
void write_table(std::ostream& out, const Table& table, OutputFormat format);

std::string format_double(double v);

}  // namespace ylab::cli
