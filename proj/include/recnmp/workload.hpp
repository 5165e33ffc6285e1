#pragma once

// Embedding tables, SLS-family operator semantics and synthetic trace
// generation.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "recnmp/common.hpp"

namespace recnmp {

enum class DType { fp32, int8q };

enum class OpKind { sum, weighted_sum, quantized_sum, quantized_weighted_sum };

inline std::string_view to_string(DType d) { return d == DType::fp32 ? "fp32" : "int8q"; }

inline DType parse_dtype(std::string_view s) {
  if (s == "fp32") return DType::fp32;
  if (s == "int8q") return DType::int8q;
  throw ConfigError("unknown dtype '" + std::string(s) + "'");
}

inline std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::sum: return "sum";
    case OpKind::weighted_sum: return "weighted-sum";
    case OpKind::quantized_sum: return "quantized-sum";
    case OpKind::quantized_weighted_sum: return "quantized-weighted-sum";
  }
  return "?";
}

inline OpKind parse_op_kind(std::string_view s) {
  if (s == "sum") return OpKind::sum;
  if (s == "weighted-sum") return OpKind::weighted_sum;
  if (s == "quantized-sum") return OpKind::quantized_sum;
  if (s == "quantized-weighted-sum") return OpKind::quantized_weighted_sum;
  throw ConfigError("unknown op kind '" + std::string(s) + "'");
}

constexpr bool is_weighted(OpKind k) {
  return k == OpKind::weighted_sum || k == OpKind::quantized_weighted_sum;
}
constexpr bool is_quantized(OpKind k) {
  return k == OpKind::quantized_sum || k == OpKind::quantized_weighted_sum;
}

struct TableSpec {
  std::uint32_t table_id = 0;
  std::uint64_t rows = 1;
  std::uint32_t vec_bytes = 64;
  DType dtype = DType::fp32;

  /// Elements per vector: 4-byte floats or 1-byte quantized codes.
  std::uint32_t elements() const { return dtype == DType::fp32 ? vec_bytes / 4 : vec_bytes; }
  /// 64B bursts per vector.
  std::uint32_t vsize() const { return vec_bytes / 64; }
  /// Address stride between consecutive rows. 192B vectors get a 256B slot so
  /// that no vector straddles a page or DRAM row.
  std::uint64_t row_stride() const { return std::bit_ceil(static_cast<std::uint64_t>(vec_bytes)); }
  std::uint64_t footprint_bytes() const { return rows * row_stride(); }

  void validate() const {
    if (vec_bytes == 0 || vec_bytes % 64 != 0 || vec_bytes > 256)
      throw ConfigError("table " + std::to_string(table_id) +
                        ": vec_bytes must be a multiple of 64 in [64, 256]");
    if (rows == 0) throw ConfigError("table " + std::to_string(table_id) + ": rows must be >= 1");
  }

  friend bool operator==(const TableSpec&, const TableSpec&) = default;
};

struct Pooling {
  std::uint32_t table_id = 0;
  std::vector<std::uint64_t> indices;
  std::optional<std::vector<float>> weights;

  float weight_at(std::size_t i) const { return weights ? (*weights)[i] : 1.0f; }

  friend bool operator==(const Pooling& a, const Pooling& b) {
    if (a.table_id != b.table_id || a.indices != b.indices) return false;
    if (a.weights.has_value() != b.weights.has_value()) return false;
    if (!a.weights) return true;
    // bitwise so that a round-tripped NaN/-0 still compares equal
    return std::equal(a.weights->begin(), a.weights->end(), b.weights->begin(), b.weights->end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }
};

struct SLSKernel {
  std::uint32_t batch_id = 0;
  OpKind op_kind = OpKind::sum;
  std::vector<Pooling> poolings;

  std::size_t lookups() const {
    std::size_t n = 0;
    for (const auto& p : poolings) n += p.indices.size();
    return n;
  }

  friend bool operator==(const SLSKernel&, const SLSKernel&) = default;
};

struct Trace {
  std::vector<TableSpec> tables;
  std::vector<SLSKernel> batches;

  const TableSpec& table(std::uint32_t id) const {
    for (const auto& t : tables)
      if (t.table_id == id) return t;
    throw ConfigError("undeclared table " + std::to_string(id));
  }

  std::size_t pooling_count() const {
    std::size_t n = 0;
    for (const auto& k : batches) n += k.poolings.size();
    return n;
  }

  void validate() const {
    std::set<std::uint32_t> ids;
    for (const auto& t : tables) {
      t.validate();
      if (!ids.insert(t.table_id).second)
        throw ConfigError("duplicate table id " + std::to_string(t.table_id));
    }
    for (const auto& k : batches) {
      if (k.poolings.empty())
        throw ConfigError("batch " + std::to_string(k.batch_id) + " has no poolings");
      for (const auto& p : k.poolings) {
        const auto& spec = table(p.table_id);
        if (is_quantized(k.op_kind) != (spec.dtype == DType::int8q))
          throw ConfigError("batch " + std::to_string(k.batch_id) + ": op " +
                            std::string(to_string(k.op_kind)) + " on " +
                            std::string(to_string(spec.dtype)) + " table " +
                            std::to_string(spec.table_id));
        if (p.weights && p.weights->size() != p.indices.size())
          throw ConfigError("weight length mismatch in table " + std::to_string(p.table_id));
        for (auto i : p.indices)
          if (i >= spec.rows)
            throw ConfigError("index " + std::to_string(i) + " out of range for table " +
                              std::to_string(p.table_id));
      }
    }
  }

  friend bool operator==(const Trace&, const Trace&) = default;
};

// ---------------------------------------------------------------------------
// Table contents

/// Rowwise affine dequantization parameters: value = scalar * q + bias.
struct QuantParams {
  float scalar = 1.0f;
  float bias = 0.0f;
};

/// Read access to embedding contents. fp32 tables answer value(); int8q tables
/// answer code() and quant(). An fp32 row behaves as scalar = 1, bias = 0.
template <class T>
concept EmbeddingValues = requires(const T& t, std::uint64_t row, std::uint32_t e) {
  { t.dtype() } -> std::same_as<DType>;
  { t.rows() } -> std::convertible_to<std::uint64_t>;
  { t.dim() } -> std::convertible_to<std::uint32_t>;
  { t.value(row, e) } -> std::same_as<float>;
  { t.code(row, e) } -> std::same_as<std::int8_t>;
  { t.quant(row) } -> std::same_as<QuantParams>;
};

/// Dense fp32 matrix, row-major.
class DenseTable {
 public:
  DenseTable(std::uint64_t rows, std::uint32_t dim, std::vector<float> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    if (data_.size() != rows_ * dim_) throw ConfigError("DenseTable: data size mismatch");
  }
  explicit DenseTable(const std::vector<std::vector<float>>& rows)
      : rows_(rows.size()), dim_(rows.empty() ? 0 : static_cast<std::uint32_t>(rows[0].size())) {
    for (const auto& r : rows) {
      if (r.size() != dim_) throw ConfigError("DenseTable: ragged rows");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }
  DType dtype() const { return DType::fp32; }
  std::uint64_t rows() const { return rows_; }
  std::uint32_t dim() const { return dim_; }
  float value(std::uint64_t r, std::uint32_t e) const { return data_[r * dim_ + e]; }
  std::int8_t code(std::uint64_t, std::uint32_t) const { return 0; }
  QuantParams quant(std::uint64_t) const { return {}; }

 private:
  std::uint64_t rows_;
  std::uint32_t dim_;
  std::vector<float> data_;
};

/// int8 rowwise-quantized matrix; (scalar, bias) stored per row.
class QuantizedTable {
 public:
  QuantizedTable(std::uint64_t rows, std::uint32_t dim, std::vector<std::int8_t> codes,
                 std::vector<QuantParams> params)
      : rows_(rows), dim_(dim), codes_(std::move(codes)), params_(std::move(params)) {
    if (codes_.size() != rows_ * dim_ || params_.size() != rows_)
      throw ConfigError("QuantizedTable: data size mismatch");
  }
  DType dtype() const { return DType::int8q; }
  std::uint64_t rows() const { return rows_; }
  std::uint32_t dim() const { return dim_; }
  float value(std::uint64_t r, std::uint32_t e) const {
    return params_[r].scalar * static_cast<float>(codes_[r * dim_ + e]) + params_[r].bias;
  }
  std::int8_t code(std::uint64_t r, std::uint32_t e) const { return codes_[r * dim_ + e]; }
  QuantParams quant(std::uint64_t r) const { return params_[r]; }

 private:
  std::uint64_t rows_;
  std::uint32_t dim_;
  std::vector<std::int8_t> codes_;
  std::vector<QuantParams> params_;
};

/// Contents generated on demand from a hash of (seed, table, row, element), so
/// million-row tables cost no memory. fp32 values and dequantized values both
/// lie in [-1, 1].
class SyntheticTable {
 public:
  SyntheticTable(const TableSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {}
  DType dtype() const { return spec_.dtype; }
  std::uint64_t rows() const { return spec_.rows; }
  std::uint32_t dim() const { return spec_.elements(); }
  float value(std::uint64_t r, std::uint32_t e) const {
    if (spec_.dtype == DType::int8q) {
      auto qp = quant(r);
      return qp.scalar * static_cast<float>(code(r, e)) + qp.bias;
    }
    return to_unit(hash(r, e)) * 2.0f - 1.0f;
  }
  std::int8_t code(std::uint64_t r, std::uint32_t e) const {
    return static_cast<std::int8_t>(static_cast<int>(hash(r, e) % 255) - 127);
  }
  QuantParams quant(std::uint64_t r) const {
    // |scalar * q| <= 0.5 and |bias| <= 0.5 keep the dequantized value in [-1, 1]
    const std::uint64_t h = hash(r, 0xFFFFFFFFu);
    const float scalar = (0.05f + 0.45f * to_unit(h)) / 127.0f;
    const float bias = to_unit(mix64(h)) - 0.5f;
    return {scalar, bias};
  }
  const TableSpec& spec() const { return spec_; }

 private:
  std::uint64_t hash(std::uint64_t r, std::uint64_t e) const {
    return mix64(seed_ ^ mix64((static_cast<std::uint64_t>(spec_.table_id) << 40) ^ mix64(r * 0x10001 + e)));
  }
  static float to_unit(std::uint64_t h) { return static_cast<float>(h >> 40) * 0x1.0p-24f; }

  TableSpec spec_;
  std::uint64_t seed_;
};

/// Golden SLS evaluation: sum_i w_i * (scalar_i * q_i + bias_i) per element,
/// accumulated in fp32 in index order. Plain fp32 rows use the stored value.
template <EmbeddingValues Table>
std::vector<float> sls_reference(const Table& table, const Pooling& pooling, OpKind op) {
  if (pooling.weights && pooling.weights->size() != pooling.indices.size())
    throw ConfigError("weight length mismatch");
  if (is_quantized(op) != (table.dtype() == DType::int8q))
    throw ConfigError("op kind does not match table dtype");
  const std::uint32_t dim = table.dim();
  std::vector<float> out(dim, 0.0f);
  for (std::size_t i = 0; i < pooling.indices.size(); ++i) {
    const auto row = pooling.indices[i];
    if (row >= table.rows())
      throw ConfigError("index " + std::to_string(row) + " out of range");
    const float w = is_weighted(op) ? pooling.weight_at(i) : 1.0f;
    if (is_quantized(op)) {
      const QuantParams qp = table.quant(row);
      for (std::uint32_t e = 0; e < dim; ++e) {
        const float deq = qp.scalar * static_cast<float>(table.code(row, e)) + qp.bias;
        out[e] += w * deq;
      }
    } else {
      for (std::uint32_t e = 0; e < dim; ++e) out[e] += w * table.value(row, e);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace generators

namespace detail {

inline void check_gen_args(const std::vector<TableSpec>& tables, std::uint32_t pooling_factor) {
  if (tables.empty()) throw ConfigError("trace generator: empty table list");
  if (pooling_factor == 0) throw ConfigError("trace generator: pooling_factor must be >= 1");
  for (const auto& t : tables) t.validate();
}

inline OpKind op_for(const TableSpec& t, bool weighted) {
  if (t.dtype == DType::int8q) return weighted ? OpKind::quantized_weighted_sum : OpKind::quantized_sum;
  return weighted ? OpKind::weighted_sum : OpKind::sum;
}

/// Inverse-CDF sampler for popularity rank k (0-based) with P(k) ~ 1/(k+1)^s.
class ZipfSampler {
 public:
  ZipfSampler(std::uint64_t n, double exponent) : cdf_(n) {
    double acc = 0.0;
    for (std::uint64_t k = 0; k < n; ++k) {
      acc += exponent == 0.0 ? 1.0 : std::pow(static_cast<double>(k + 1), -exponent);
      cdf_[k] = acc;
    }
    for (auto& c : cdf_) c /= acc;
  }
  std::uint64_t sample(Rng& rng) const {
    const double u = rng.uniform01();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<std::uint64_t>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace detail

/// One kernel per (batch, table), batch-major. Indices uniform i.i.d.
/// Weights (drawn uniformly in [0, 1]) are attached when `weighted`.
inline Trace gen_random_trace(const std::vector<TableSpec>& tables, std::uint32_t num_batches,
                              std::uint32_t poolings_per_batch, std::uint32_t pooling_factor,
                              std::uint64_t seed, bool weighted = false) {
  detail::check_gen_args(tables, pooling_factor);
  Trace trace;
  trace.tables = tables;
  Rng rng(seed);
  for (std::uint32_t b = 0; b < num_batches; ++b) {
    for (const auto& t : tables) {
      SLSKernel k{b, detail::op_for(t, weighted), {}};
      for (std::uint32_t p = 0; p < poolings_per_batch; ++p) {
        Pooling pool{t.table_id, {}, std::nullopt};
        pool.indices.reserve(pooling_factor);
        for (std::uint32_t i = 0; i < pooling_factor; ++i) pool.indices.push_back(rng.below(t.rows));
        if (weighted) {
          pool.weights.emplace();
          for (std::uint32_t i = 0; i < pooling_factor; ++i) pool.weights->push_back(static_cast<float>(rng.uniform01()));
        }
        k.poolings.push_back(std::move(pool));
      }
      trace.batches.push_back(std::move(k));
    }
  }
  trace.validate();
  return trace;
}

/// Zipf exponent calibrated so that an interleaved 8-table trace of 1M-row,
/// 64B tables lands in the 20-60% hit-rate band of a 4-way LRU cache across
/// 8-64MB (see tools/ `locality` and the acceptance suite).
inline constexpr double kCalibratedZipfExponent = 0.93;

/// Same layout as gen_random_trace, but indices follow a Zipf popularity law
/// and each table owns a random rank->row permutation so that hot rows are
/// scattered across the table's address range.
inline Trace gen_locality_trace(const std::vector<TableSpec>& tables, std::uint32_t num_batches,
                                std::uint32_t poolings_per_batch, std::uint32_t pooling_factor,
                                double zipf_exponent, std::uint64_t seed, bool weighted = false) {
  detail::check_gen_args(tables, pooling_factor);
  if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be >= 0");

  std::map<std::uint64_t, std::shared_ptr<detail::ZipfSampler>> samplers;
  std::vector<std::vector<std::uint64_t>> perms;
  for (const auto& t : tables) {
    auto& s = samplers[t.rows];
    if (!s) s = std::make_shared<detail::ZipfSampler>(t.rows, zipf_exponent);
    std::vector<std::uint64_t> perm(t.rows);
    for (std::uint64_t i = 0; i < t.rows; ++i) perm[i] = i;
    Rng prng(derive_seed(seed, 1000 + t.table_id));
    for (std::uint64_t i = t.rows; i > 1; --i) std::swap(perm[i - 1], perm[prng.below(i)]);
    perms.push_back(std::move(perm));
  }

  Trace trace;
  trace.tables = tables;
  Rng rng(seed);
  for (std::uint32_t b = 0; b < num_batches; ++b) {
    for (std::size_t ti = 0; ti < tables.size(); ++ti) {
      const auto& t = tables[ti];
      const auto& sampler = *samplers.at(t.rows);
      SLSKernel k{b, detail::op_for(t, weighted), {}};
      for (std::uint32_t p = 0; p < poolings_per_batch; ++p) {
        Pooling pool{t.table_id, {}, std::nullopt};
        pool.indices.reserve(pooling_factor);
        for (std::uint32_t i = 0; i < pooling_factor; ++i) pool.indices.push_back(perms[ti][sampler.sample(rng)]);
        if (weighted) {
          pool.weights.emplace();
          for (std::uint32_t i = 0; i < pooling_factor; ++i) pool.weights->push_back(static_cast<float>(rng.uniform01()));
        }
        k.poolings.push_back(std::move(pool));
      }
      trace.batches.push_back(std::move(k));
    }
  }
  trace.validate();
  return trace;
}

/// Round-robin interleave of the input traces' kernels. With replication r,
/// every source table appears r times under distinct ids (Comb-8 x r).
/// Copy 0 keeps its original ids unless two inputs collide; every other
/// table gets the next unused id.
inline Trace interleave_traces(const std::vector<Trace>& traces, std::uint32_t replication = 1) {
  if (traces.empty()) throw ConfigError("interleave_traces: no input traces");
  if (replication == 0) throw ConfigError("interleave_traces: replication must be >= 1");

  // id_map[copy][trace][old id] -> new id
  std::vector<std::vector<std::unordered_map<std::uint32_t, std::uint32_t>>> id_map(
      replication, std::vector<std::unordered_map<std::uint32_t, std::uint32_t>>(traces.size()));
  std::set<std::uint32_t> used;
  Trace out;
  auto fresh = [&]() { return used.empty() ? 0u : *used.rbegin() + 1; };
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (const auto& t : traces[i].tables) {
      const std::uint32_t id = used.count(t.table_id) ? fresh() : t.table_id;
      used.insert(id);
      id_map[0][i][t.table_id] = id;
    }
  }
  for (std::uint32_t c = 1; c < replication; ++c)
    for (std::size_t i = 0; i < traces.size(); ++i)
      for (const auto& t : traces[i].tables) {
        const std::uint32_t id = fresh();
        used.insert(id);
        id_map[c][i][t.table_id] = id;
      }
  for (std::uint32_t c = 0; c < replication; ++c)
    for (std::size_t i = 0; i < traces.size(); ++i)
      for (auto t : traces[i].tables) {
        t.table_id = id_map[c][i].at(t.table_id);
        out.tables.push_back(t);
      }

  std::size_t longest = 0;
  for (const auto& t : traces) longest = std::max(longest, t.batches.size());
  for (std::size_t round = 0; round < longest; ++round)
    for (std::uint32_t c = 0; c < replication; ++c)
      for (std::size_t i = 0; i < traces.size(); ++i) {
        if (round >= traces[i].batches.size()) continue;
        SLSKernel k = traces[i].batches[round];
        for (auto& p : k.poolings) p.table_id = id_map[c][i].at(p.table_id);
        out.batches.push_back(std::move(k));
      }
  return out;
}

/// Uniform tables of the desk-scale default shape.
inline std::vector<TableSpec> make_tables(std::uint32_t count, std::uint64_t rows = 1'000'000,
                                          std::uint32_t vec_bytes = 64, DType dtype = DType::fp32,
                                          std::uint32_t first_id = 0) {
  std::vector<TableSpec> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back({first_id + i, rows, vec_bytes, dtype});
  return out;
}

}  // namespace recnmp
