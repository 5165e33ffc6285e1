#include <gtest/gtest.h>

#include "recnmp/cache.hpp"
#include "support/lru_oracle.hpp"

using namespace recnmp;

namespace {

std::vector<AccessKind> kinds(LruCache& c, std::initializer_list<std::uint64_t> lines) {
  std::vector<AccessKind> out;
  for (auto l : lines) out.push_back(c.access_line(l).kind);
  return out;
}

}  // namespace

TEST(LruCache, ReuseFits) {
  LruCache c({4 * 64, 64, 2, true, false});
  // lines 0 and 2 land in the same set of two ways
  EXPECT_EQ(kinds(c, {0, 2, 0}), (std::vector{AccessKind::miss, AccessKind::miss, AccessKind::hit}));
}

TEST(LruCache, SingleLineThrashes) {
  LruCache c({64, 64, 1, true, false});
  EXPECT_EQ(kinds(c, {0, 1, 0}), (std::vector{AccessKind::miss, AccessKind::miss, AccessKind::miss}));
  EXPECT_EQ(c.stats().evictions, 2u);
}

TEST(LruCache, BypassIsStateless) {
  LruCache c({1024, 64, 4, true, false});
  c.access_line(3);
  c.access_line(7);
  const auto before = c.digest();
  for (int i = 0; i < 5; ++i) EXPECT_EQ(c.access_line(3, false).kind, AccessKind::bypassed);
  EXPECT_EQ(c.digest(), before);
  EXPECT_EQ(c.stats().hits, 0u);
  EXPECT_EQ(c.stats().bypasses, 5u);
  EXPECT_EQ(c.stats().accesses, 7u);
}

TEST(LruCache, BypassUnsupportedAllocates) {
  LruCache c({1024, 64, 4, false, false});
  EXPECT_EQ(c.access_line(3, false).kind, AccessKind::miss);
  EXPECT_EQ(c.access_line(3, false).kind, AccessKind::hit);
}

TEST(LruCache, RepeatedAddressAlwaysHitsAfterFirst) {
  LruCache c({8 * kMiB, 64, 4, true, false});
  for (int i = 0; i < 1000; ++i) c.access(0x12345640);
  EXPECT_EQ(c.stats().misses, 1u);
  EXPECT_DOUBLE_EQ(c.stats().hit_rate(), 0.999);
}

TEST(LruCache, EvictedVictimIsLru) {
  LruCache c({2 * 64, 64, 2, true, true});
  c.access_line(1);
  c.access_line(2);
  c.access_line(1);
  const auto out = c.access_line(3);
  ASSERT_TRUE(out.evicted);
  EXPECT_EQ(*out.evicted, 2u);
  EXPECT_TRUE(c.contains_line(1));
  EXPECT_FALSE(c.contains_line(2));
}

TEST(LruCache, ConfigValidation) {
  EXPECT_THROW(LruCache({1000, 64, 4, true, false}), ConfigError);
  EXPECT_THROW(LruCache({1024, 48, 4, true, false}), ConfigError);
  EXPECT_THROW(LruCache({3 * 64 * 4, 64, 4, true, false}), ConfigError);  // 3 sets
  EXPECT_NO_THROW(LruCache({3 * 64, 64, 4, true, true}));
}

TEST(LruCache, MatchesBruteForce) {
  Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const unsigned ways = 1u << rng.below(4);
    const std::uint64_t sets = 1ULL << rng.below(5);
    const bool fa = trial % 5 == 0;
    CacheConfig cfg{sets * ways * 64, 64, ways, true, fa};
    LruCache c(cfg);
    oracle::ListLru ref(fa ? 1 : sets, fa ? static_cast<unsigned>(sets * ways) : ways);
    const std::uint64_t universe = 1 + rng.below(4 * sets * ways + 8);
    const int n = 1 + static_cast<int>(rng.below(10000));
    for (int i = 0; i < n; ++i) {
      const auto line = rng.below(universe);
      const bool cacheable = rng.below(8) != 0;
      const auto got = c.access_line(line, cacheable).kind;
      const auto want = ref.access_line(line, cacheable);
      ASSERT_EQ(static_cast<int>(got), static_cast<int>(want)) << "trial " << trial << " access " << i;
    }
    EXPECT_EQ(c.stats().hits, ref.hits);
    EXPECT_EQ(c.stats().misses, ref.misses);
    EXPECT_EQ(c.stats().bypasses, ref.bypasses);
    EXPECT_EQ(c.stats().evictions, ref.evictions);
  }
}

TEST(LruCache, InclusionWhenWaysDouble) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint64_t sets = 1ULL << rng.below(4);
    const unsigned ways = 1u << rng.below(3);
    LruCache small({sets * ways * 64, 64, ways, true, false});
    LruCache big({sets * ways * 128, 64, ways * 2, true, false});
    LruCache fa_small({sets * ways * 64, 64, 1, true, true});
    LruCache fa_big({sets * ways * 128, 64, 1, true, true});
    for (int i = 0; i < 5000; ++i) {
      const auto line = rng.below(6 * sets * ways);
      const bool hs = small.access_line(line).kind == AccessKind::hit;
      const bool hb = big.access_line(line).kind == AccessKind::hit;
      ASSERT_TRUE(!hs || hb);
      const bool fs = fa_small.access_line(line).kind == AccessKind::hit;
      const bool fb = fa_big.access_line(line).kind == AccessKind::hit;
      ASSERT_TRUE(!fs || fb);
    }
  }
}

TEST(LruCache, Deterministic) {
  Rng a(3), b(3);
  LruCache x({4096, 64, 4, true, false}), y({4096, 64, 4, true, false});
  for (int i = 0; i < 5000; ++i) {
    x.access(a.below(1 << 16));
    y.access(b.below(1 << 16));
  }
  EXPECT_EQ(x.stats(), y.stats());
  EXPECT_EQ(x.digest(), y.digest());
}

TEST(SweepCapacity, UniformMatchesAnalytic) {
  // 512MB footprint, 16MB cache: steady-state hit rate C/F = 1/32.
  Rng rng(77);
  const std::uint64_t footprint = 512 * kMiB;
  std::vector<std::uint64_t> addr(3'000'000);
  for (auto& a : addr) a = rng.below(footprint / 64) * 64;
  const auto pts = sweep_capacity(addr, {16 * kMiB});
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_NEAR(pts[0].hit_rate, 16.0 / 512.0, 0.02);
  EXPECT_LT(pts[0].hit_rate, 0.05);
}

TEST(SweepLine, StridedStreamGainsSpatialHits) {
  std::vector<std::uint64_t> addr;
  for (std::uint64_t i = 0; i < 80000; ++i) addr.push_back(i * 64);
  const auto pts = sweep_line(addr, {64, 128, 256, 512}, 1 * kMiB);
  EXPECT_DOUBLE_EQ(pts[0].hit_rate, 0.0);
  EXPECT_DOUBLE_EQ(pts[1].hit_rate, 0.5);
  EXPECT_DOUBLE_EQ(pts[2].hit_rate, 0.75);
  EXPECT_DOUBLE_EQ(pts[3].hit_rate, 7.0 / 8.0);
}

TEST(SweepCapacity, EmptyStreamRejected) {
  EXPECT_THROW(sweep_capacity(std::vector<std::uint64_t>{}), ConfigError);
}

TEST(SweepCapacity, MonotoneOnSkewedStream) {
  Rng rng(12);
  std::vector<std::uint64_t> addr;
  for (int i = 0; i < 200000; ++i) addr.push_back(mix64(rng.below(1 + rng.below(50000))) % (1ULL << 32) / 64 * 64);
  const auto pts = sweep_capacity(addr, {8 * 1024, 64 * 1024, 512 * 1024, 4 * kMiB});
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_GE(pts[i].hit_rate, pts[i - 1].hit_rate);
}
