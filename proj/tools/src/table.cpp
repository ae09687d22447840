// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include "ylab_tools/table.hpp"

#include <fmt/format.h>

#include <json.hpp>
#include <ostream>
#include <stdexcept>

namespace ylab::cli {

void Table::add(std::vector<Cell> row) {
  if (row.size() != columns.size()) throw std::logic_error("table row width mismatch");
  rows.push_back(std::move(row));
}

std::string format_double(double v) { return fmt::format("{:.12g}", v); }

namespace {

std::string csv_cell(const Cell& c) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>) {
          if (v.find_first_of(",\"\n") == std::string::npos) return v;
          std::string q = "\"";
          for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
          return q + "\"";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(v);
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else {
          return std::to_string(v);
        }
      },
      c);
}

}  // namespace

void write_csv(std::ostream& out, const Table& table) {
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    out << (i ? "," : "") << table.columns[i];
  }
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_cell(row[i]);
    out << '\n';
  }
}

void write_json(std::ostream& out, const Table& table) {
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : table.rows) {
    nlohmann::ordered_json obj = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::visit([&](const auto& v) { obj[table.columns[i]] = v; }, row[i]);
    }
    rows.push_back(std::move(obj));
  }
  out << rows.dump(2) << '\n';
}

void write_table(std::ostream& out, const Table& table, OutputFormat format) {
  if (format == OutputFormat::json) {
    write_json(out, table);
  } else {
    write_csv(out, table);
  }
}

}  // namespace ylab::cli
