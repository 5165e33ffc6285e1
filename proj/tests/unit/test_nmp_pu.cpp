#include <gtest/gtest.h>

#include <cmath>

#include "recnmp/mem_controller.hpp"
#include "recnmp/nmp_pu.hpp"
#include "support/lru_oracle.hpp"
#include "support/timing_checker.hpp"

using namespace recnmp;

namespace {

NMPInst inst_at(const MappingConfig& m, DramCoord c, std::uint8_t tags, std::uint8_t tag = 0, bool locality = false) {
  NMPInst i;
  i.daddr = pack_daddr(c, m);
  i.rank_id = static_cast<std::uint8_t>(c.rank_id(m));
  i.ddr_cmd = tags;
  i.psum_tag = tag;
  i.locality = locality;
  i.weight = 1.0f;
  return i;
}

NMPPacket packet_of(std::vector<NMPInst> insts, unsigned num_tags = 1) {
  NMPPacket p;
  p.insts = std::move(insts);
  p.num_tags = num_tags;
  for (std::size_t i = 0; i < p.insts.size(); ++i) {
    ++p.counters[p.insts[i].psum_tag];
    p.rows.push_back(i);
  }
  return p;
}

NmpConfig no_cache() {
  NmpConfig c;
  c.cache_enabled = false;
  c.log_commands = true;
  return c;
}

void expect_timing_clean(const MappingConfig& m, const NmpResult& r, const NmpConfig& cfg) {
  const oracle::TimingChecker checker(TimingParams{}, oracle::geometry_of(m, false), cfg.refresh);
  const auto v = checker.check(r.log);
  EXPECT_TRUE(v.empty()) << (v.empty() ? "" : v[0].rule);
}

// Stream of `per_rank` 64B row-hit reads on every rank, alternating bank groups.
std::vector<NMPPacket> row_hit_stream(const MappingConfig& m, unsigned ranks, unsigned per_rank) {
  std::vector<NMPInst> insts;
  RowStateTracker rows(m);
  for (unsigned k = 0; k < per_rank; ++k)
    for (unsigned r = 0; r < ranks; ++r) {
      const unsigned bank = k % 16, col = (k / 16) % 128;
      DramCoord c{r / m.ranks_per_dimm, r % m.ranks_per_dimm, bank % 4, bank / 4, 7, col};
      auto i = inst_at(m, c, 0);
      i.ddr_cmd = rows.tags_for(r, c.bank_index(m), c.row);
      rows.open(r, c.bank_index(m), c.row);
      insts.push_back(i);
    }
  return {packet_of(insts)};
}

}  // namespace

TEST(NmpSimulator, EmptyStream) {
  NmpSimulator sim(MappingConfig::from_label("4x2"), TimingParams{}, NmpConfig{});
  EXPECT_EQ(sim.run({}).cycles, 0);
}

TEST(NmpSimulator, TreeLevels) {
  EXPECT_EQ(tree_levels(1), 0u);
  EXPECT_EQ(tree_levels(2), 1u);
  EXPECT_EQ(tree_levels(4), 2u);
  EXPECT_EQ(tree_levels(8), 3u);
}

TEST(NmpSimulator, SingleMissTimeline) {
  const auto m = MappingConfig::from_label("1x1");
  const auto cfg = no_cache();
  NmpSimulator sim(m, TimingParams{}, cfg);
  const auto r = sim.run({packet_of({inst_at(m, {0, 0, 0, 0, 3, 0}, ddr_cmd::ACT | ddr_cmd::RD)})});
  // init 2, arrival->lookup 1, ACT, tRCD 16, tCL 16, tBL 4, mult 4, add 3, transfer 1
  EXPECT_EQ(r.cycles, 2 + 1 + 16 + 16 + 4 + 4 + 3 + 1);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].cycle, 3);
  EXPECT_EQ(r.log[1].cycle, 19);
  expect_timing_clean(m, r, cfg);
}

TEST(NmpSimulator, CacheHitPath) {
  const auto m = MappingConfig::from_label("1x1");
  NmpConfig cfg;
  cfg.rank_release = RankRelease::on_completion;
  NmpSimulator sim(m, TimingParams{}, cfg);
  const DramCoord c{0, 0, 1, 1, 9, 4};
  const auto r = sim.run({packet_of({inst_at(m, c, ddr_cmd::ACT | ddr_cmd::RD, 0, true)}),
                          packet_of({inst_at(m, c, 0, 0, true)})});
  ASSERT_EQ(r.pu.packet_completion.size(), 2u);
  // init 2, arrival->lookup 1, cache 1, mult 4, add 3, transfer 1
  EXPECT_EQ(r.pu.packet_completion[1] - r.pu.packet_dispatch[1], 2 + 1 + 1 + 4 + 3 + 1);
  EXPECT_EQ(r.pu.ranks[0].cache.hits, 1u);
  EXPECT_EQ(r.pu.ranks[0].dram_reads, 1u);
}

TEST(NmpSimulator, CacheLatencyTable) {
  NmpConfig cfg;
  EXPECT_EQ(cfg.cache_latency(), 1);
  cfg.cache_latency_table = default_latency_growth();
  EXPECT_EQ(cfg.cache_latency(), 1);
  cfg.cache.capacity_bytes = 1024 * 1024;
  EXPECT_EQ(cfg.cache_latency(), 4);
  cfg.cache_latency_table = {{1, 0}};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(NmpSimulator, BypassLeavesCacheAlone) {
  const auto m = MappingConfig::from_label("1x1");
  NmpSimulator sim(m, TimingParams{}, NmpConfig{});
  const DramCoord c{0, 0, 2, 0, 5, 1};
  const auto r = sim.run({packet_of({inst_at(m, c, ddr_cmd::ACT | ddr_cmd::RD), inst_at(m, c, ddr_cmd::RD)})});
  EXPECT_EQ(r.pu.ranks[0].dram_reads, 2u);
  EXPECT_EQ(r.pu.ranks[0].cache.bypasses, 2u);
  EXPECT_EQ(r.pu.ranks[0].cache.hits + r.pu.ranks[0].cache.misses, 0u);
}

TEST(NmpSimulator, MissingRdTagIsProtocolError) {
  const auto m = MappingConfig::from_label("1x1");
  NmpSimulator sim(m, TimingParams{}, no_cache());
  EXPECT_THROW(sim.run({packet_of({inst_at(m, {0, 0, 0, 0, 0, 0}, 0)})}), ProtocolError);
}

TEST(NmpSimulator, SingleRankPacketIsFinishPlusTreePlusTransfer) {
  const auto m = MappingConfig::from_label("4x2");
  NmpSimulator sim(m, TimingParams{}, no_cache());
  std::vector<NMPInst> v;
  RowStateTracker rows(m);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    DramCoord c{1, 1, static_cast<unsigned>(rng.below(4)), static_cast<unsigned>(rng.below(4)), rng.below(4), 0};
    auto in = inst_at(m, c, 0);
    in.ddr_cmd = rows.tags_for(3, c.bank_index(m), c.row);
    rows.open(3, c.bank_index(m), c.row);
    v.push_back(in);
  }
  const auto r = sim.run({packet_of(v)});
  EXPECT_EQ(r.pu.ranks[3].insts, 20u);
  EXPECT_EQ(r.pu.packet_completion[0], r.pu.packet_dispatch[0] + r.pu.ranks[3].busy_cycles + 3 + 1);
}

TEST(NmpSimulator, CompletionTracksMostLoadedRank) {
  const auto m = MappingConfig::from_label("4x2");
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto cfg = no_cache();
    NmpSimulator sim(m, TimingParams{}, cfg);
    std::vector<NMPInst> v;
    RowStateTracker rows(m);
    const auto n = 1 + rng.below(120);
    for (std::uint64_t i = 0; i < n; ++i) {
      const unsigned rid = static_cast<unsigned>(rng.below(8));
      DramCoord c{rid / 2, rid % 2, static_cast<unsigned>(rng.below(4)), static_cast<unsigned>(rng.below(4)),
                  rng.below(3), static_cast<unsigned>(rng.below(128))};
      auto in = inst_at(m, c, 0, static_cast<std::uint8_t>(rng.below(8)));
      in.ddr_cmd = rows.tags_for(rid, c.bank_index(m), c.row);
      rows.open(rid, c.bank_index(m), c.row);
      v.push_back(in);
    }
    const auto r = sim.run({packet_of(v, 8)});
    Cycle worst = 0;
    std::uint64_t insts = 0;
    for (const auto& rk : r.pu.ranks) worst = std::max(worst, rk.busy_cycles), insts += rk.insts;
    EXPECT_EQ(insts, n);
    EXPECT_EQ(r.pu.packet_completion[0] - r.pu.packet_dispatch[0], worst + 3 + 1);
    expect_timing_clean(m, r, cfg);
  }
}

TEST(NmpSimulator, EvenSpreadOverEightRanks) {
  // 80 row misses spread 10 per rank; compare with the same instruction mix
  // all sent to one rank, and with one rank's share run alone.
  const auto m = MappingConfig::from_label("4x2");
  Rng rng(12);
  std::vector<NMPInst> spread, share;
  for (int i = 0; i < 80; ++i) {
    const unsigned rid = static_cast<unsigned>(i % 8), bank = static_cast<unsigned>((i / 8) % 16);
    const std::uint64_t row = rng.below(60000);
    spread.push_back(inst_at(m, {rid / 2, rid % 2, bank % 4, bank / 4, row, 0}, ddr_cmd::ACT | ddr_cmd::RD));
    if (rid == 0) share.push_back(spread.back());
  }
  std::vector<NMPInst> single;
  RowStateTracker rows(m);
  for (const auto& s : spread) {
    auto c = unpack_daddr(s.daddr, s.rank_id, m);
    c.dimm = 0;
    c.rank = 0;
    auto in = inst_at(m, c, 0);
    in.ddr_cmd = rows.tags_for(0, c.bank_index(m), c.row);
    rows.open(0, c.bank_index(m), c.row);
    single.push_back(in);
  }
  NmpSimulator sim(m, TimingParams{}, no_cache());
  const auto a = sim.run({packet_of(spread)});
  const auto b = sim.run({packet_of(single)});
  const auto c = sim.run({packet_of(share)});
  for (const auto& rk : a.pu.ranks) EXPECT_EQ(rk.insts, 10u);
  // Ranks run concurrently: the spread packet costs about one rank's share.
  EXPECT_LE(a.cycles, c.cycles + 8);
  EXPECT_GE(a.cycles, c.cycles);
  EXPECT_GT(static_cast<double>(b.cycles) / static_cast<double>(a.cycles), 6.0);
}

TEST(NmpSimulator, RowHitStreamScalesWithRanks) {
  const auto m = MappingConfig::from_label("4x2");
  const auto cfg = no_cache();
  NmpSimulator sim(m, TimingParams{}, cfg);
  const auto one = sim.run(row_hit_stream(m, 1, 4096));
  const auto eight = sim.run(row_hit_stream(m, 8, 4096));
  auto throughput = [](const NmpResult& r) {
    return static_cast<double>(r.channel.total_reads()) / static_cast<double>(r.channel.last_data_end - r.channel.first_data);
  };
  EXPECT_GE(throughput(eight) / throughput(one), 7.5);
  EXPECT_LE(throughput(eight) / throughput(one), 8.0 + 1e-9);
  expect_timing_clean(m, eight, cfg);
}

TEST(NmpSimulator, CaBudgetNeverExceeded) {
  const auto m = MappingConfig::from_label("4x2");
  for (auto arb : {CaArbiter::most_remaining, CaArbiter::round_robin}) {
    auto cfg = no_cache();
    cfg.ca_arbiter = arb;
    NmpSimulator sim(m, TimingParams{}, cfg);
    const auto r = sim.run(row_hit_stream(m, 8, 512));
    // Each instruction needs at least one C/A slot; 8*512 insts at 2 per clock.
    EXPECT_GE(r.pu.packet_completion[0], 8 * 512 / 2);
  }
}

TEST(NmpSimulator, HitRateParityWithStandaloneCache) {
  const auto m = MappingConfig::from_label("2x2");
  Rng rng(44);
  std::vector<NMPPacket> packets;
  for (int p = 0; p < 40; ++p) {
    std::vector<NMPInst> v;
    for (int i = 0; i < 30; ++i) {
      const unsigned rid = static_cast<unsigned>(rng.below(4));
      DramCoord c{rid / 2, rid % 2, static_cast<unsigned>(rng.below(4)), static_cast<unsigned>(rng.below(4)),
                  rng.below(50), static_cast<unsigned>(rng.below(128))};
      auto in = inst_at(m, c, 0, static_cast<std::uint8_t>(i % 4), rng.below(4) != 0);
      in.vsize = static_cast<std::uint8_t>(1 + rng.below(2));
      if (c.column + in.vsize > 128) in.vsize = 1;
      v.push_back(in);
    }
    packets.push_back(packet_of(v, 4));
  }
  NmpConfig cfg;
  cfg.cache = {8 * 1024, 64, 4, true, false};
  finalize_schedule(packets, m, cfg.cache, true);
  NmpSimulator sim(m, TimingParams{}, cfg);
  const auto r = sim.run(packets);
  std::vector<oracle::ListLru> ref(4, oracle::ListLru(cfg.cache.sets(), cfg.cache.ways));
  for (const auto& p : packets)
    for (const auto& i : p.insts)
      for (unsigned b = 0; b < i.vsize; ++b) ref[i.rank_id].access_line(i.daddr + b, i.locality);
  for (unsigned rk = 0; rk < 4; ++rk) {
    EXPECT_EQ(r.pu.ranks[rk].cache.hits, ref[rk].hits);
    EXPECT_EQ(r.pu.ranks[rk].cache.misses, ref[rk].misses);
    EXPECT_EQ(r.pu.ranks[rk].cache.bypasses, ref[rk].bypasses);
  }
  expect_timing_clean(m, r, cfg);
}

TEST(NmpSimulator, Deterministic) {
  const auto m = MappingConfig::from_label("4x2");
  NmpConfig cfg;
  cfg.log_commands = true;
  NmpSimulator sim(m, TimingParams{}, cfg);
  auto pk = row_hit_stream(m, 8, 300);
  const auto a = sim.run(pk), b = sim.run(pk);
  EXPECT_EQ(a.cycles, b.cycles);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.pu.packet_completion, b.pu.packet_completion);
}

TEST(DimmReduce, Examples) {
  EXPECT_EQ(dimm_reduce({{3, {1.5f, -2.0f}}}), (std::vector<float>{1.5f, -2.0f}));
  std::map<unsigned, std::vector<float>> ones;
  for (unsigned r = 0; r < 8; ++r) ones[r] = {1.0f, 1.0f};
  EXPECT_EQ(dimm_reduce(ones), (std::vector<float>{8.0f, 8.0f}));
  EXPECT_THROW(dimm_reduce({{0, {1.0f}}}, {0, 1}), ProtocolError);
  EXPECT_THROW(dimm_reduce({}), ProtocolError);
  EXPECT_THROW(dimm_reduce({{0, {1.0f}}, {1, {1.0f, 2.0f}}}), ProtocolError);
}

TEST(DimmReduce, ReassociationTolerance) {
  Rng rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const unsigned n = 2 + static_cast<unsigned>(rng.below(7));
    std::map<unsigned, std::vector<float>> ps;
    for (unsigned r = 0; r < n; ++r) ps[r] = {rng.uniform(-1.0f, 1.0f)};
    float ltr = 0.0f;
    for (const auto& [r, v] : ps) ltr += v[0];
    const float tree = dimm_reduce(ps)[0];
    worst = std::max(worst, std::abs(double(tree) - ltr) / (std::abs(double(ltr)) + 1.0));
  }
  EXPECT_LE(worst, 1e-6);
}

namespace {

struct FunctionalFixture {
  MappingConfig m = MappingConfig::from_label("4x2");
  Trace trace;
  PageMap pages;
  std::map<std::uint32_t, SyntheticTable> tables;
  FunctionalFixture() {
    trace.tables = {{0, 50000, 64, DType::fp32}, {1, 50000, 256, DType::fp32}, {2, 50000, 128, DType::int8q}};
    pages = allocate_pages(trace.tables, m, 2);
    for (const auto& t : trace.tables) tables.emplace(t.table_id, SyntheticTable(t, 77));
  }
  const SyntheticTable& operator()(std::uint32_t id) const { return tables.at(id); }
};

}  // namespace

TEST(ExecutePacket, SingleRankUnitWeightsMatchOracle) {
  FunctionalFixture f;
  auto m1 = MappingConfig::from_label("1x1");
  const auto pages = allocate_pages(f.trace.tables, m1, 3);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Pooling pool{0, {}, std::nullopt};
    for (int i = 0; i < 1 + static_cast<int>(rng.below(100)); ++i) pool.indices.push_back(rng.below(50000));
    const auto pk = build_packets(SLSKernel{0, OpKind::sum, {pool}}, f.trace, pages, m1, 8);
    const auto sums = execute_packet(pk[0], m1, f);
    const auto want = sls_reference(f(0), pool, OpKind::sum);
    double worst = 0.0;
    for (std::size_t e = 0; e < want.size(); ++e)
      worst = std::max(worst, std::abs(double(sums.per_tag[0][e]) - want[e]) / (std::abs(double(want[e])) + 1.0));
    EXPECT_LE(worst, 1e-6);
  }
}

TEST(ExecutePacket, EightRanksMatchOracle) {
  FunctionalFixture f;
  Rng rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::uint32_t tid = static_cast<std::uint32_t>(rng.below(3));
    const bool quant = tid == 2;
    const OpKind op = rng.below(2) ? (quant ? OpKind::quantized_weighted_sum : OpKind::weighted_sum)
                                   : (quant ? OpKind::quantized_sum : OpKind::sum);
    SLSKernel k{0, op, {}};
    const auto np = 1 + rng.below(8);
    for (std::uint64_t p = 0; p < np; ++p) {
      Pooling pool{tid, {}, std::nullopt};
      if (is_weighted(op)) pool.weights.emplace();
      const auto pf = 1 + rng.below(80);
      for (std::uint64_t i = 0; i < pf; ++i) {
        pool.indices.push_back(rng.below(50000));
        if (pool.weights) pool.weights->push_back(rng.uniform(-1.0f, 1.0f));
      }
      k.poolings.push_back(std::move(pool));
    }
    auto pk = build_packets(k, f.trace, f.pages, f.m, 8);
    finalize_schedule(pk, f.m, CacheConfig{}, true);
    ASSERT_EQ(pk.size(), 1u);
    const auto sums = execute_packet(pk[0], f.m, f);
    for (unsigned t = 0; t < pk[0].num_tags; ++t) {
      EXPECT_EQ(sums.decrements[t], pk[0].counters[t]);
      const auto want = sls_reference(f(tid), k.poolings[t], op);
      for (std::size_t e = 0; e < want.size(); ++e)
        worst = std::max(worst, std::abs(double(sums.per_tag[t][e]) - want[e]) / (std::abs(double(want[e])) + 1.0));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(ExecutePacket, CounterUnderflowAndMismatch) {
  FunctionalFixture f;
  auto pk = build_packets(SLSKernel{0, OpKind::sum, {{0, {1, 2, 3}, std::nullopt}}}, f.trace, f.pages, f.m, 8);
  auto bad = pk[0];
  bad.rows.pop_back();
  EXPECT_THROW(execute_packet(bad, f.m, f), ProtocolError);
  bad = pk[0];
  bad.elements = 64;
  EXPECT_THROW(execute_packet(bad, f.m, f), ProtocolError);
}
