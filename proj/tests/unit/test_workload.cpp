#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "recnmp/trace_io.hpp"
#include "recnmp/workload.hpp"
#include "support/stats.hpp"

using namespace recnmp;

namespace {

Pooling pool(std::uint32_t table, std::vector<std::uint64_t> idx, std::optional<std::vector<float>> w = {}) {
  return {table, std::move(idx), std::move(w)};
}

}  // namespace

TEST(SlsReference, UnweightedSum) {
  DenseTable t({{1, 2}, {3, 4}});
  EXPECT_EQ(sls_reference(t, pool(0, {0, 1}), OpKind::sum), (std::vector<float>{4, 6}));
}

TEST(SlsReference, WeightedSum) {
  DenseTable t({{1, 2}, {3, 4}});
  EXPECT_EQ(sls_reference(t, pool(0, {0, 1}, std::vector<float>{0.5f, 0.5f}), OpKind::weighted_sum),
            (std::vector<float>{2, 3}));
}

TEST(SlsReference, QuantizedSingleRow) {
  QuantizedTable t(1, 1, {2}, {{0.5f, 1.0f}});
  const auto out = sls_reference(t, pool(0, {0}), OpKind::quantized_sum);
  ASSERT_EQ(out.size(), 1u);
  const float expect = 0.5f * 2.0f + 1.0f;  // scalar * q + bias
  EXPECT_EQ(out[0], expect);
}

TEST(SlsReference, QuantizedWeighted) {
  QuantizedTable t(2, 2, {1, -1, 4, 2}, {{0.25f, 0.0f}, {1.0f, -1.0f}});
  const auto out = sls_reference(t, pool(0, {0, 1}, std::vector<float>{2.0f, 0.5f}), OpKind::quantized_weighted_sum);
  EXPECT_FLOAT_EQ(out[0], 2.0f * 0.25f + 0.5f * 3.0f);
  EXPECT_FLOAT_EQ(out[1], 2.0f * -0.25f + 0.5f * 1.0f);
}

TEST(SlsReference, UnweightedOpIgnoresWeights) {
  DenseTable t({{1}, {2}});
  EXPECT_EQ(sls_reference(t, pool(0, {0, 1}, std::vector<float>{9, 9}), OpKind::sum), (std::vector<float>{3}));
}

TEST(SlsReference, Errors) {
  DenseTable t({{1}, {2}});
  EXPECT_THROW(sls_reference(t, pool(0, {2}), OpKind::sum), ConfigError);
  EXPECT_THROW(sls_reference(t, pool(0, {0, 1}, std::vector<float>{1}), OpKind::weighted_sum), ConfigError);
  EXPECT_THROW(sls_reference(t, pool(0, {0}), OpKind::quantized_sum), ConfigError);
}

TEST(SlsReference, PermutationInvariantWithinTolerance) {
  TableSpec spec{0, 5000, 256, DType::fp32};
  SyntheticTable t(spec, 7);
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Pooling p{0, {}, std::vector<float>{}};
    for (int i = 0; i < 80; ++i) {
      p.indices.push_back(rng.below(spec.rows));
      p.weights->push_back(rng.uniform(-1.0f, 1.0f));
    }
    Pooling q = p;
    std::vector<std::size_t> perm(p.indices.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      q.indices[i] = p.indices[perm[i]];
      (*q.weights)[i] = (*p.weights)[perm[i]];
    }
    const auto a = sls_reference(t, p, OpKind::weighted_sum);
    const auto b = sls_reference(t, q, OpKind::weighted_sum);
    for (std::size_t e = 0; e < a.size(); ++e)
      worst = std::max(worst, std::abs(double(a[e]) - b[e]) / (std::abs(double(a[e])) + 1.0));
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(SyntheticTable, ValuesInUnitRange) {
  for (auto dt : {DType::fp32, DType::int8q}) {
    SyntheticTable t({3, 1000, 128, dt}, 11);
    for (std::uint64_t r = 0; r < 1000; r += 7)
      for (std::uint32_t e = 0; e < t.dim(); ++e) {
        const float v = t.value(r, e);
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
      }
  }
}

TEST(TableSpec, Validation) {
  EXPECT_NO_THROW((TableSpec{0, 1, 192, DType::fp32}.validate()));
  EXPECT_THROW((TableSpec{0, 1, 96, DType::fp32}.validate()), ConfigError);
  EXPECT_THROW((TableSpec{0, 1, 320, DType::fp32}.validate()), ConfigError);
  EXPECT_THROW((TableSpec{0, 0, 64, DType::fp32}.validate()), ConfigError);
  EXPECT_EQ((TableSpec{0, 1, 64, DType::fp32}.elements()), 16u);
  EXPECT_EQ((TableSpec{0, 1, 64, DType::int8q}.elements()), 64u);
  EXPECT_EQ((TableSpec{0, 10, 192, DType::fp32}.row_stride()), 256u);
}

TEST(GenRandomTrace, DegenerateTable) {
  const auto tr = gen_random_trace({{0, 1, 64, DType::fp32}}, 3, 2, 17, 5);
  for (const auto& k : tr.batches)
    for (const auto& p : k.poolings)
      for (auto i : p.indices) EXPECT_EQ(i, 0u);
}

TEST(GenRandomTrace, Deterministic) {
  const auto tables = make_tables(3, 1000);
  EXPECT_EQ(gen_random_trace(tables, 4, 3, 20, 42), gen_random_trace(tables, 4, 3, 20, 42));
  EXPECT_NE(gen_random_trace(tables, 4, 3, 20, 42), gen_random_trace(tables, 4, 3, 20, 43));
}

TEST(GenRandomTrace, Shape) {
  const auto tr = gen_random_trace(make_tables(2, 100), 3, 4, 5, 1, true);
  EXPECT_EQ(tr.batches.size(), 6u);
  EXPECT_EQ(tr.pooling_count(), 24u);
  for (const auto& k : tr.batches) {
    EXPECT_EQ(k.op_kind, OpKind::weighted_sum);
    for (const auto& p : k.poolings) {
      EXPECT_EQ(p.indices.size(), 5u);
      ASSERT_TRUE(p.weights);
      EXPECT_EQ(p.weights->size(), 5u);
    }
  }
}

TEST(GenRandomTrace, Errors) {
  EXPECT_THROW(gen_random_trace({}, 1, 1, 1, 1), ConfigError);
  EXPECT_THROW(gen_random_trace(make_tables(1, 10), 1, 1, 0, 1), ConfigError);
}

TEST(GenRandomTrace, UniformChiSquare) {
  // 10^6 lookups into 10^6 rows, binned into 1000 equal ranges.
  const auto tr = gen_random_trace({{0, 1'000'000, 64, DType::fp32}}, 1, 12500, 80, 99);
  std::vector<std::uint64_t> bins(1000, 0);
  std::uint64_t n = 0;
  for (const auto& k : tr.batches)
    for (const auto& p : k.poolings)
      for (auto i : p.indices) ++bins[i / 1000], ++n;
  ASSERT_EQ(n, 1'000'000u);
  const std::vector<double> expected(1000, static_cast<double>(n) / 1000.0);
  EXPECT_LT(oracle::chi_square(bins, expected), oracle::chi_square_critical(999));
}

TEST(GenLocalityTrace, Deterministic) {
  const auto tables = make_tables(2, 5000);
  EXPECT_EQ(gen_locality_trace(tables, 2, 3, 10, 0.9, 8), gen_locality_trace(tables, 2, 3, 10, 0.9, 8));
}

TEST(GenLocalityTrace, ZeroExponentIsUniform) {
  const auto tr = gen_locality_trace({{0, 1000, 64, DType::fp32}}, 1, 2500, 80, 0.0, 4);
  std::vector<std::uint64_t> bins(100, 0);
  for (const auto& p : tr.batches[0].poolings)
    for (auto i : p.indices) ++bins[i / 10];
  EXPECT_LT(oracle::chi_square(bins, std::vector<double>(100, 2000.0)), oracle::chi_square_critical(99));
}

TEST(GenLocalityTrace, SkewedAndScattered) {
  const auto tr = gen_locality_trace({{0, 100000, 64, DType::fp32}}, 1, 100, 80, 1.0, 4);
  std::map<std::uint64_t, std::uint64_t> counts;
  for (const auto& p : tr.batches[0].poolings)
    for (auto i : p.indices) ++counts[i];
  std::vector<std::pair<std::uint64_t, std::uint64_t>> top;
  for (auto [row, c] : counts) top.push_back({c, row});
  std::sort(top.rbegin(), top.rend());
  // The hottest row draws far more than the uniform share (8000/100000).
  EXPECT_GT(top[0].first, 400u);
  // Hot rows are not clustered at the start of the table.
  std::uint64_t low = 0;
  for (int k = 0; k < 10; ++k) low += top[k].second < 1000;
  EXPECT_LT(low, 5u);
  EXPECT_THROW(gen_locality_trace({{0, 10, 64, DType::fp32}}, 1, 1, 1, -0.5, 1), ConfigError);
}

TEST(InterleaveTraces, IdentityForOneTrace) {
  const auto t = gen_random_trace(make_tables(2, 50), 3, 2, 4, 1);
  EXPECT_EQ(interleave_traces({t}, 1), t);
}

TEST(InterleaveTraces, RoundRobinComb8) {
  std::vector<Trace> parts;
  for (std::uint32_t i = 0; i < 8; ++i) parts.push_back(gen_random_trace(make_tables(1, 100, 64, DType::fp32, i), 3, 2, 4, i));
  const auto out = interleave_traces(parts, 1);
  EXPECT_EQ(out.tables.size(), 8u);
  ASSERT_EQ(out.batches.size(), 24u);
  for (std::size_t k = 0; k < out.batches.size(); ++k) {
    EXPECT_EQ(out.batches[k].poolings[0].table_id, k % 8);
    EXPECT_EQ(out.batches[k], parts[k % 8].batches[k / 8]);
  }
}

TEST(InterleaveTraces, ReplicationMakesDistinctTables) {
  std::vector<Trace> parts;
  std::size_t total = 0;
  for (std::uint32_t i = 0; i < 8; ++i) {
    parts.push_back(gen_random_trace(make_tables(1, 100, 64, DType::fp32, i), 2, 3, 4, i));
    total += parts.back().pooling_count();
  }
  const auto out = interleave_traces(parts, 8);
  std::set<std::uint32_t> ids;
  for (const auto& t : out.tables) ids.insert(t.table_id);
  EXPECT_EQ(ids.size(), 64u);
  EXPECT_EQ(out.pooling_count(), 8 * total);
  EXPECT_NO_THROW(out.validate());
  EXPECT_THROW(interleave_traces({}, 1), ConfigError);
}

TEST(TraceIo, RoundTripGenerated) {
  for (bool weighted : {false, true}) {
    auto tables = make_tables(2, 300, 128);
    tables.push_back({7, 50, 256, DType::int8q});
    const auto t = gen_locality_trace(tables, 3, 4, 6, 0.8, 5, weighted);
    EXPECT_EQ(read_trace(write_trace(t)), t);
  }
}

TEST(TraceIo, RoundTripExactFloats) {
  Trace t;
  t.tables = {{0, 10, 64, DType::fp32}};
  t.batches = {{0, OpKind::weighted_sum, {{0, {1, 2, 3}, std::vector<float>{0.1f, -1e-30f, 3.4e38f}}}}};
  EXPECT_EQ(read_trace(write_trace(t)), t);
}

TEST(TraceIo, EmptyTraceIsHeaderOnly) {
  EXPECT_EQ(write_trace(Trace{}), std::string(kTraceHeader) + "\n");
  EXPECT_EQ(read_trace(std::string(kTraceHeader) + "\n"), Trace{});
}

TEST(TraceIo, HandWrittenFile) {
  const auto t = read_trace(
      "# recnmp-trace v1\n"
      "table 3 rows=100 vec_bytes=128 dtype=fp32\n"
      "batch 9\n"
      "pool 3 4,5,99 weights=0.5,1,-2\n");
  Trace want;
  want.tables = {{3, 100, 128, DType::fp32}};
  want.batches = {{9, OpKind::weighted_sum, {{3, {4, 5, 99}, std::vector<float>{0.5f, 1.0f, -2.0f}}}}};
  EXPECT_EQ(t, want);
}

TEST(TraceIo, ErrorsCarryLineNumbers) {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      read_trace(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("# recnmp-trace v1\ntable 0 rows=10 vec_bytes=64 dtype=fp16\n"), 2u);
  EXPECT_EQ(line_of("# recnmp-trace v1\ntable 0 rows=10 vec_bytes=64 dtype=fp32\nbatch 0\npool 0 1,10\n"), 4u);
  EXPECT_EQ(line_of("# recnmp-trace v1\nbatch 0\npool 1 1\n"), 3u);
  EXPECT_EQ(line_of("table 0 rows=10 vec_bytes=64 dtype=fp32\n"), 1u);
  EXPECT_EQ(line_of("# recnmp-trace v1\ntable 0 rows=10 vec_bytes=64 dtype=fp32\nbatch 0\npool 0 1,2 weights=1\n"), 4u);
  EXPECT_EQ(line_of("# recnmp-trace v1\nbogus\n"), 2u);
}
