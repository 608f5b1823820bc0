#pragma once

// Minimal RFC 4180 style CSV reading and writing.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace qmet::csv {

/// Shortest decimal text that round-trips; "inf", "-inf", "nan" otherwise.
std::string format_double(double value);

/// Quotes a field if it contains a comma, quote, or newline.
std::string escape(std::string_view field);

class Writer {
 public:
  /// Truncates `path` and writes the header row.
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& fields);
  std::size_t columns() const { return columns_; }

 private:
  std::ofstream out_;
  std::size_t columns_;
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws std::out_of_range if absent.
  std::size_t column(std::string_view name) const;
};

Table read(const std::filesystem::path& path);
Table parse(std::string_view text);

}  // namespace qmet::csv
