#include "gradshield/csv.hpp"

#include <algorithm>

namespace gradshield {

std::size_t CsvTable::column(std::string_view name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? npos : static_cast<std::size_t>(it - header.begin());
}

void CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header.size())
    throw CsvError("row has " + std::to_string(row.size()) + " fields, header has " + std::to_string(header.size()));
  rows.push_back(std::move(row));
}

CsvTable versioned_table(std::vector<std::string> columns) {
  CsvTable t;
  t.header.push_back(kSchemaColumn);
  t.header.insert(t.header.end(), columns.begin(), columns.end());
  return t;
}

void add_versioned(CsvTable& table, std::vector<std::string> row) {
  row.insert(row.begin(), kSchemaVersion);
  table.add(std::move(row));
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string to_csv(const CsvTable& table) {
  std::string out;
  auto record = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(fields[i]);
    }
    out += '\n';
  };
  record(table.header);
  for (const auto& r : table.rows) record(r);
  return out;
}

CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
          if (i + 1 < text.size() && text[i + 1] != ',' && text[i + 1] != '\n' && text[i + 1] != '\r')
            throw CsvError("line " + std::to_string(line) + ": text after closing quote");
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"') {
      if (field_started || !field.empty()) throw CsvError("line " + std::to_string(line) + ": quote inside field");
      quoted = field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      continue;
    } else if (c == '\n') {
      end_record();
      ++line;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw CsvError("unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();

  CsvTable t;
  if (records.empty()) throw CsvError("empty CSV");
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size())
      throw CsvError("record " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                     " fields, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

}  // namespace gradshield
