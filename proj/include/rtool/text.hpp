#pragma once

// Small text helpers shared by the TSV/CSV readers and writers.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "rtool/error.hpp"

namespace rtool::text {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\n')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

template <class Int>
std::optional<Int> parse_int(std::string_view s) {
  s = trim(s);
  Int v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s == "nan") return std::nan("");
  if (s == "inf") return HUGE_VAL;
  if (s == "-inf") return -HUGE_VAL;
  double v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<bool> parse_bool(std::string_view s) {
  s = trim(s);
  if (s == "1" || s == "true" || s == "TRUE" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "FALSE" || s == "no") return false;
  return std::nullopt;
}

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

/// Fixed 17-significant-digit form, used where a minimum precision is promised.
inline std::string format_precise(double v) {
  if (std::isnan(v)) return "nan";
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                               std::chars_format::general, 17);
  return std::string(buf.data(), p);
}

/// Number of Unicode code points in a UTF-8 string.
inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

/// Escapes tab, newline, carriage return and backslash for TSV cells.
inline std::string escape_cell(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape_cell(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      char n = s[++i];
      switch (n) {
        case 't': out += '\t'; break;
        case 'n': out += '\n'; break;
        case 'r': out += '\r'; break;
        case '\\': out += '\\'; break;
        default: out += '\\'; out += n;
      }
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

/// 64-bit FNV-1a; stable across platforms, used for content fingerprints.
class Fnv1a {
 public:
  Fnv1a& update(std::string_view data) {
    for (unsigned char c : data) {
      hash_ ^= c;
      hash_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(double v) { return update(format_double(v)).update("|"); }
  Fnv1a& update(std::int64_t v) { return update(std::to_string(v)).update("|"); }

  std::uint64_t value() const noexcept { return hash_; }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_;
    return os.str();
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string fingerprint(std::string_view data) { return Fnv1a{}.update(data).hex(); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("short write: " + path);
}

/// Splits file content into lines, dropping a trailing empty line and any '\r'.
inline std::vector<std::string> lines(std::string_view content) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < content.size()) {
    auto pos = content.find('\n', start);
    if (pos == std::string_view::npos) pos = content.size();
    std::string_view l = content.substr(start, pos - start);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    out.emplace_back(l);
    start = pos + 1;
  }
  return out;
}

/// Header-indexed TSV reader. Column lookup is by name so optional columns may appear in any order.
class TsvReader {
 public:
  TsvReader(std::string content, std::string name) : name_(std::move(name)), lines_(lines(content)) {
    if (lines_.empty()) throw SchemaError(name_ + ": empty file, header row required");
    for (auto h : split(lines_[0], '\t')) header_.emplace_back(trim(h));
  }

  static TsvReader from_file(const std::string& path) { return TsvReader(read_file(path), path); }

  const std::string& name() const noexcept { return name_; }
  const std::vector<std::string>& header() const noexcept { return header_; }

  std::optional<std::size_t> find(std::string_view column) const {
    for (std::size_t i = 0; i < header_.size(); ++i)
      if (header_[i] == column) return i;
    return std::nullopt;
  }

  std::size_t require(std::string_view column) const {
    auto i = find(column);
    if (!i) throw SchemaError(name_ + ": missing required column '" + std::string(column) + "'");
    return *i;
  }

  /// Calls fn(line_number, fields) for every non-blank data row.
  template <class Fn>
  void for_each_row(Fn&& fn) const {
    for (std::size_t i = 1; i < lines_.size(); ++i) {
      if (trim(lines_[i]).empty()) continue;
      auto fields = split(lines_[i], '\t');
      if (fields.size() < header_.size()) {
        // trailing optional cells may be dropped by some writers
        fields.resize(header_.size(), std::string_view{});
      } else if (fields.size() > header_.size()) {
        throw ParseError(name_, i + 1, "expected " + std::to_string(header_.size()) +
                                           " fields, found " + std::to_string(fields.size()));
      }
      fn(i + 1, fields);
    }
  }

 private:
  std::string name_;
  std::vector<std::string> lines_;
  std::vector<std::string> header_;
};

}  // namespace rtool::text
