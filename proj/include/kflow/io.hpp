#pragma once

/// CSV exchange formats and little-endian float64 blobs.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "kflow/error.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

/// 17 significant digits: enough to round-trip any double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint32_t crc32_bytes(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void append_f64_le(std::string& out, double v) { append_u64_le(out, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64_le(const char* p) { return std::bit_cast<double>(read_u64_le(p)); }

inline std::string encode_blob(const std::vector<const Tensor*>& tensors) {
  std::string out;
  for (const Tensor* t : tensors)
    for (double v : t->storage()) append_f64_le(out, v);
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path + "' is empty");
  t.header = split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw IoError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) + " fields");
    std::vector<double> row;
    for (const auto& c : cells) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(c, &used));
        if (used != c.size()) throw std::invalid_argument(c);
      } catch (const std::exception&) {
        throw IoError(path + ":" + std::to_string(lineno) + ": bad number '" + c + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot write '" + path + "'");
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }

  template <class... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(cells), first = false), ...);
    out_ << '\n';
  }

  void close() {
    out_.close();
    if (!out_) throw IoError("write failed for '" + path_ + "'");
  }

 private:
  static std::string cell(double v) { return fmt_double(v); }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  template <class I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  std::string path_;
  std::ofstream out_;
};

/// Sample set with header `x,y`.
inline void write_points_csv(const std::string& path, const Tensor& pts) {
  require(pts.cols() == 2, "write_points_csv: points must be [n,2]");
  CsvWriter w(path, {"x", "y"});
  for (std::size_t i = 0; i < pts.rows(); ++i) w.row(pts(i, 0), pts(i, 1));
  w.close();
}

/// Reads the x,y columns of a CSV. When the file has a `t` column, only rows
/// at `t_select` are kept (default: the largest t present).
inline Tensor read_points_csv(const std::string& path, std::optional<double> t_select = std::nullopt) {
  const CsvTable t = read_csv(path);
  const auto cx = t.column("x"), cy = t.column("y");
  if (!cx || !cy) throw IoError("'" + path + "' has no x,y columns");
  const auto ct = t.column("t");
  std::optional<double> keep;
  if (ct) {
    if (t_select) {
      keep = t_select;
    } else {
      for (const auto& r : t.rows) keep = keep ? std::max(*keep, r[*ct]) : r[*ct];
    }
  }
  std::vector<double> data;
  for (const auto& r : t.rows) {
    if (ct && r[*ct] != *keep) continue;
    data.push_back(r[*cx]);
    data.push_back(r[*cy]);
  }
  if (data.empty()) throw IoError("'" + path + "' contains no matching points");
  const std::size_t n = data.size() / 2;
  return Tensor({n, 2}, std::move(data));
}

}  // namespace kflow
