#pragma once

// Line-oriented trace format:
//
//   # recnmp-trace v1
//   table <id> rows=<n> vec_bytes=<64|128|192|256> dtype=<fp32|int8q>
//   batch <batch_id>[ op=<kind>]
//   pool <table_id> <i0,i1,...>[ weights=<w0,w1,...>]
//
// `op=` is written only when the kind cannot be inferred from the batch
// (quantized iff its tables are int8q, weighted iff any pool has weights).

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "recnmp/workload.hpp"

namespace recnmp {

inline constexpr std::string_view kTraceHeader = "# recnmp-trace v1";

namespace detail {

inline OpKind inferred_op(const Trace& trace, const SLSKernel& k) {
  bool quant = false, weighted = false;
  for (const auto& p : k.poolings) {
    for (const auto& t : trace.tables)
      if (t.table_id == p.table_id && t.dtype == DType::int8q) quant = true;
    if (p.weights) weighted = true;
  }
  if (quant) return weighted ? OpKind::quantized_weighted_sum : OpKind::quantized_sum;
  return weighted ? OpKind::weighted_sum : OpKind::sum;
}

inline void put_float(std::ostream& os, float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  os.write(buf, res.ptr - buf);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_uint(std::string_view s, std::size_t line, std::string_view what) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec == std::errc::result_out_of_range)
    throw ParseError(line, std::string(what) + " overflow: '" + std::string(s) + "'");
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty())
    throw ParseError(line, "bad " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

inline float parse_float(std::string_view s, std::size_t line) {
  float v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty())
    throw ParseError(line, "bad weight: '" + std::string(s) + "'");
  return v;
}

inline std::string_view attr(std::string_view tok, std::string_view key, std::size_t line) {
  if (tok.substr(0, key.size()) != key || tok.size() <= key.size() || tok[key.size()] != '=')
    throw ParseError(line, "expected " + std::string(key) + "=...");
  return tok.substr(key.size() + 1);
}

}  // namespace detail

inline void write_trace(const Trace& trace, std::ostream& os) {
  os << kTraceHeader << '\n';
  for (const auto& t : trace.tables)
    os << "table " << t.table_id << " rows=" << t.rows << " vec_bytes=" << t.vec_bytes
       << " dtype=" << to_string(t.dtype) << '\n';
  for (const auto& k : trace.batches) {
    os << "batch " << k.batch_id;
    if (k.op_kind != detail::inferred_op(trace, k)) os << " op=" << to_string(k.op_kind);
    os << '\n';
    for (const auto& p : k.poolings) {
      os << "pool " << p.table_id << ' ';
      for (std::size_t i = 0; i < p.indices.size(); ++i) os << (i ? "," : "") << p.indices[i];
      if (p.weights) {
        os << " weights=";
        for (std::size_t i = 0; i < p.weights->size(); ++i) {
          if (i) os << ',';
          detail::put_float(os, (*p.weights)[i]);
        }
      }
      os << '\n';
    }
  }
}

inline std::string write_trace(const Trace& trace) {
  std::ostringstream os;
  write_trace(trace, os);
  return os.str();
}

inline Trace read_trace(std::istream& is) {
  Trace trace;
  std::string raw;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::vector<bool> explicit_op;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!header_seen) {
      if (line != kTraceHeader) throw ParseError(line_no, "missing '# recnmp-trace v1' header");
      header_seen = true;
      continue;
    }
    if (line.empty() || line.front() == '#') continue;
    auto toks = detail::split(line, ' ');
    std::erase_if(toks, [](std::string_view t) { return t.empty(); });
    const auto kw = toks[0];
    if (kw == "table") {
      if (toks.size() != 5) throw ParseError(line_no, "table line needs 4 fields");
      TableSpec t;
      t.table_id = detail::parse_uint<std::uint32_t>(toks[1], line_no, "table id");
      t.rows = detail::parse_uint<std::uint64_t>(detail::attr(toks[2], "rows", line_no), line_no, "rows");
      t.vec_bytes = detail::parse_uint<std::uint32_t>(detail::attr(toks[3], "vec_bytes", line_no), line_no, "vec_bytes");
      const auto dt = detail::attr(toks[4], "dtype", line_no);
      if (dt == "fp32") t.dtype = DType::fp32;
      else if (dt == "int8q") t.dtype = DType::int8q;
      else throw ParseError(line_no, "unknown dtype '" + std::string(dt) + "'");
      try {
        t.validate();
      } catch (const ConfigError& e) {
        throw ParseError(line_no, e.what());
      }
      for (const auto& other : trace.tables)
        if (other.table_id == t.table_id) throw ParseError(line_no, "duplicate table id");
      trace.tables.push_back(t);
    } else if (kw == "batch") {
      if (toks.size() < 2 || toks.size() > 3) throw ParseError(line_no, "batch line needs an id");
      SLSKernel k;
      k.batch_id = detail::parse_uint<std::uint32_t>(toks[1], line_no, "batch id");
      explicit_op.push_back(toks.size() == 3);
      if (toks.size() == 3) {
        try {
          k.op_kind = parse_op_kind(detail::attr(toks[2], "op", line_no));
        } catch (const ConfigError& e) {
          throw ParseError(line_no, e.what());
        }
      }
      trace.batches.push_back(std::move(k));
    } else if (kw == "pool") {
      if (trace.batches.empty()) throw ParseError(line_no, "pool before any batch");
      if (toks.size() < 3 || toks.size() > 4) throw ParseError(line_no, "pool line needs table id and indices");
      Pooling p;
      p.table_id = detail::parse_uint<std::uint32_t>(toks[1], line_no, "table id");
      const TableSpec* spec = nullptr;
      for (const auto& t : trace.tables)
        if (t.table_id == p.table_id) spec = &t;
      if (!spec) throw ParseError(line_no, "pool references undeclared table " + std::to_string(p.table_id));
      for (auto s : detail::split(toks[2], ',')) {
        const auto idx = detail::parse_uint<std::uint64_t>(s, line_no, "index");
        if (idx >= spec->rows) throw ParseError(line_no, "index overflow: " + std::to_string(idx) + " >= rows");
        p.indices.push_back(idx);
      }
      if (toks.size() == 4) {
        p.weights.emplace();
        for (auto s : detail::split(detail::attr(toks[3], "weights", line_no), ','))
          p.weights->push_back(detail::parse_float(s, line_no));
        if (p.weights->size() != p.indices.size()) throw ParseError(line_no, "weight length mismatch");
      }
      trace.batches.back().poolings.push_back(std::move(p));
    } else {
      throw ParseError(line_no, "unknown record '" + std::string(kw) + "'");
    }
  }
  if (!header_seen) throw ParseError(1, "empty trace file");
  for (std::size_t i = 0; i < trace.batches.size(); ++i)
    if (!explicit_op[i]) trace.batches[i].op_kind = detail::inferred_op(trace, trace.batches[i]);
  return trace;
}

inline Trace read_trace(std::string_view text) {
  std::istringstream is{std::string(text)};
  return read_trace(is);
}

inline Trace read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file '" + path + "'");
  return read_trace(in);
}

inline void write_trace_file(const Trace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace file '" + path + "'");
  write_trace(trace, out);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace recnmp
