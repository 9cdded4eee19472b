#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace acfpipe::csv {

// Minimal CSV model used by the manifest, feature and report files.
// Comment lines start with '#' and may appear before the header; they carry
// "key=value" metadata.
struct Table {
  std::vector<std::string> comments;  // without the leading '#'
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::string> meta(const std::string& key) const;
  int column(const std::string& name) const;  // -1 when absent
};

Table read_file(const std::filesystem::path& path);
Table parse(const std::string& text);

std::vector<std::string> split_line(const std::string& line);
std::string join_line(const std::vector<std::string>& fields);

double to_double(const std::string& field);  // FormatError on junk
long to_long(const std::string& field);

// Deterministic shortest-ish representation with `sig` significant digits.
std::string format_double(double v, int sig = 10);

void write_file(const std::filesystem::path& path, const Table& table);

}  // namespace acfpipe::csv
