#pragma once

// Minimal RFC-4180-style CSV reading: header row, quoted fields, '.' decimals.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mvperm/errors.hpp"

namespace mvperm::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based source line of each row, for diagnostics.
  std::vector<std::size_t> lines;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    return std::nullopt;
  }
  bool has(std::string_view name) const { return column(name).has_value(); }
};

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

inline Table parse(std::string_view text) {
  Table t;
  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> starts;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, field_quoted = false, any = false;
  std::size_t line = 1, rec_line = 1, quoted_end = 0;
  auto end_field = [&] {
    // Anything after the closing quote (spaces, a CR) is dropped.
    if (field_quoted) field.resize(quoted_end);
    rec.push_back(field_quoted ? field : trim(field));
    field.clear();
    field_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = rec.size() == 1 && rec[0].empty();
    if (!blank) {
      records.push_back(std::move(rec));
      starts.push_back(rec_line);
    }
    rec.clear();
  };
  std::size_t i = 0;
  if (text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;  // UTF-8 BOM
  for (; i < text.size(); ++i) {
    const char c = text[i];
    any = true;
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
          quoted_end = field.size();
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && trim(field).empty()) {
      field.clear();
      quoted = field_quoted = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n') {
      end_record();
      ++line;
      rec_line = line;
      any = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw DataError("unterminated quoted field starting near line " + std::to_string(rec_line));
  if (any) end_record();
  if (records.empty()) throw DataError("CSV input has no header row");
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw DataError("line " + std::to_string(starts[r]) + ": expected " +
                      std::to_string(t.header.size()) + " fields, found " +
                      std::to_string(records[r].size()));
    }
    t.rows.push_back(std::move(records[r]));
    t.lines.push_back(starts[r]);
  }
  return t;
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

/// Parses a finite real; throws DataError naming the location.
inline double to_double(const std::string& s, std::size_t line, std::string_view column) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (b != e && *b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, v);
  if (s.empty() || ec != std::errc() || ptr != e || !std::isfinite(v)) {
    throw DataError("line " + std::to_string(line) + ", column '" + std::string(column) +
                    "': '" + s + "' is not a finite number");
  }
  return v;
}

inline long long to_integer(const std::string& s, std::size_t line, std::string_view column) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("line " + std::to_string(line) + ", column '" + std::string(column) +
                    "': '" + s + "' is not an integer");
  }
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t a = 0;
  while (true) {
    const auto b = s.find(sep, a);
    out.push_back(trim(s.substr(a, b == std::string_view::npos ? std::string_view::npos : b - a)));
    if (b == std::string_view::npos) break;
    a = b + 1;
  }
  return out;
}

/// Quotes a field when needed.
inline std::string escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace mvperm::csv
