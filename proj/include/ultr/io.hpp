#pragma once

// Tab-separated artifact files. Every file the pipeline writes starts with a
// "# ultr <kind> v<version>" line; readers reject a header naming a different
// kind or version. Files without a header are read as plain rows.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ultr/common.hpp"

namespace ultr::io {

inline constexpr int kFormatVersion = 1;

struct Row {
  std::size_t line_number;
  std::vector<std::string> fields;
};

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline std::string header(std::string_view kind) {
  return "# ultr " + std::string(kind) + " v" + std::to_string(kFormatVersion);
}

/// Opens `path` for writing, creating missing parent directories.
inline std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot open '" + path + "' for writing");
  return os;
}

inline std::ofstream open_artifact(const std::string& path, std::string_view kind) {
  auto os = open_out(path);
  os << header(kind) << '\n';
  return os;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Reads the data rows of a tab-separated artifact. Blank lines and '#' comments are
/// skipped; a header for another kind or format version is rejected.
inline std::vector<Row> read_rows(const std::string& path, std::string_view kind,
                                  std::size_t expected_fields) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open '" + path + "'");
  std::vector<Row> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# ultr ", 0) == 0) {
      if (line != header(kind))
        throw data_error(path + ":" + std::to_string(n) + ": expected header '" + header(kind) +
                         "', found '" + line + "' (stale or foreign artifact)");
      continue;
    }
    if (line[0] == '#') continue;
    auto fields = split(line, '\t');
    if (expected_fields && fields.size() != expected_fields)
      throw data_error(path + ":" + std::to_string(n) + ": expected " + std::to_string(expected_fields) +
                       " tab-separated fields, found " + std::to_string(fields.size()));
    rows.push_back({n, std::move(fields)});
  }
  return rows;
}

inline double parse_double(const std::string& s, std::string_view what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error("invalid number for " + std::string(what) + ": '" + s + "'");
  }
}

inline long long parse_int(const std::string& s, std::string_view what) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw data_error("invalid integer for " + std::string(what) + ": '" + s + "'");
  return v;
}

/// Shortest round-trip representation of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace ultr::io
