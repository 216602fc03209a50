#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "snmm/common.hpp"

namespace snmm {

// Minimal CSV support for the panel schema: header row required, UTF-8,
// '.' decimal separator, empty cell = missing. No quoting or escaping;
// the schema contains only identifiers and numbers.

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    return -1;
  }

  int require_column(const std::string& name, const std::string& file) const {
    int j = column(name);
    if (j < 0) throw structural_error("missing column '" + name + "' in " + file);
    return j;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  out.push_back(cell);
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw structural_error("cannot open file: " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw validation_error("empty CSV file: " + path);
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != table.header.size())
      throw validation_error("ragged row in " + path + ": expected " +
                             std::to_string(table.header.size()) + " cells, got " +
                             std::to_string(cells.size()));
    table.rows.push_back(std::move(cells));
  }
  return table;
}

// Shortest decimal string that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = std::strtod(buf, nullptr);
    if (back == v) return buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& cell, const std::string& context) {
  if (cell.empty()) throw validation_error("empty numeric cell in " + context);
  char* end = nullptr;
  double v = std::strtod(cell.c_str(), &end);
  if (end == cell.c_str() || *end != '\0')
    throw validation_error("cannot parse number '" + cell + "' in " + context);
  return v;
}

inline long parse_long(const std::string& cell, const std::string& context) {
  if (cell.empty()) throw validation_error("empty integer cell in " + context);
  char* end = nullptr;
  long v = std::strtol(cell.c_str(), &end, 10);
  if (end == cell.c_str() || *end != '\0')
    throw validation_error("cannot parse integer '" + cell + "' in " + context);
  return v;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw structural_error("cannot write file: " + path);
  out << content;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw structural_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace snmm
