#pragma once

// RFC 4180 CSV: fields containing a comma, quote, CR or LF are quoted and
// inner quotes doubled. Records end in LF; the reader also accepts CRLF.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gradshield {

// Every CSV written by the tools starts with this column.
inline constexpr const char* kSchemaColumn = "schema_version";
inline constexpr const char* kSchemaVersion = "1";

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  [[nodiscard]] std::size_t column(std::string_view name) const;
  // Appends a row; throws if its width differs from the header.
  void add(std::vector<std::string> row);
};

// A table whose first column is kSchemaColumn.
CsvTable versioned_table(std::vector<std::string> columns);
// Prepends kSchemaVersion to the row.
void add_versioned(CsvTable& table, std::vector<std::string> row);

std::string csv_escape(std::string_view field);
std::string to_csv(const CsvTable& table);
// Every record must have the header's width.
CsvTable parse_csv(std::string_view text);

}  // namespace gradshield
