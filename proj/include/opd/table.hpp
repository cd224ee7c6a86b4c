#pragma once

/**
 * Tab-separated result tables.
 *
 * One fixed header row, floating values printed with 9 significant digits,
 * FLOP counts as exact decimal integers (they are 128-bit). Output is fully
 * deterministic; wall-clock timings never go through this writer into result
 * tables (they live in a dedicated timings file).
 */

#include "opd/errors.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace opd {

// FLOP totals overflow 64 bits at paper scale (~1e20), so accounting is
// exact 128-bit integer arithmetic end to end.
using Flop = unsigned __int128;

inline std::string flop_to_string(Flop v) {
  if (v == 0) return "0";
  std::string out;
  while (v > 0) {
    out.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return std::string(out.rbegin(), out.rend());
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

class TableWriter {
 public:
  TableWriter(const std::string& path, const std::vector<std::string>& columns)
      : out_(path, std::ios::binary), columns_(columns.size()) {
    require(out_.good(), Errc::io_error, "cannot open table file: " + path);
    std::string header;
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) header.push_back('\t');
      header += columns[i];
    }
    out_ << header << '\n';
  }

  class Row {
   public:
    explicit Row(TableWriter& w) : w_(w) {}
    ~Row() { w_.end_row(cells_); }
    Row(const Row&) = delete;
    Row& operator=(const Row&) = delete;

    Row& cell(const std::string& s) { cells_.push_back(s); return *this; }
    Row& cell(const char* s) { cells_.emplace_back(s); return *this; }
    Row& cell(double v) { cells_.push_back(format_double(v)); return *this; }
    Row& cell(std::int64_t v) { cells_.push_back(std::to_string(v)); return *this; }
    Row& cell(int v) { cells_.push_back(std::to_string(v)); return *this; }
    Row& cell(Flop v) { cells_.push_back(flop_to_string(v)); return *this; }

   private:
    TableWriter& w_;
    std::vector<std::string> cells_;
  };

  Row row() { return Row(*this); }

 private:
  friend class Row;

  void end_row(const std::vector<std::string>& cells) {
    require(cells.size() == columns_, Errc::io_error,
            "table row has " + std::to_string(cells.size()) + " cells, expected " +
                std::to_string(columns_));
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line.push_back('\t');
      line += cells[i];
    }
    out_ << line << '\n';
  }

  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace opd
