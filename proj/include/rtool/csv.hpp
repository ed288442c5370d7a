#pragma once

// Minimal CSV tables: quoted only when needed, so emit(parse(emit(t))) is byte-identical.

#include <string>
#include <string_view>
#include <vector>

#include "rtool/error.hpp"

namespace rtool::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const Table&) const = default;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw SchemaError("csv: missing column '" + std::string(name) + "'");
  }
};

inline std::string quote(std::string_view cell) {
  if (cell.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(cell);
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string emit(const Table& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += quote(cells[i]);
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw ValidationError("csv: row width differs from header");
    line(r);
  }
  return out;
}

inline Table parse(std::string_view s, const std::string& name = "csv") {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string cell;
  bool quoted = false, in_quotes = false, any = false;
  std::size_t line = 1;
  auto end_cell = [&] {
    rec.push_back(std::move(cell));
    cell.clear();
    quoted = false;
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < s.size() && s[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        cell += c;
      }
      continue;
    }
    any = true;
    if (c == '"' && cell.empty() && !quoted) {
      in_quotes = quoted = true;
    } else if (c == ',') {
      end_cell();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < s.size() && s[i + 1] == '\n') ++i;
      end_cell();
      records.push_back(std::move(rec));
      rec.clear();
      any = false;
      ++line;
    } else {
      if (quoted) throw ParseError(name, line, "text after closing quote");
      cell += c;
    }
  }
  if (in_quotes) throw ParseError(name, line, "unterminated quoted cell");
  if (any || !cell.empty() || !rec.empty()) {
    end_cell();
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw SchemaError(name + ": empty CSV, header row required");
  Table t;
  t.header = std::move(records.front());
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != t.header.size())
      throw ParseError(name, i + 1, "expected " + std::to_string(t.header.size()) + " cells, found " +
                                        std::to_string(records[i].size()));
    t.rows.push_back(std::move(records[i]));
  }
  return t;
}

}  // namespace rtool::csv
