#pragma once

// Set-associative LRU cache with bypass, used standalone for locality sweeps
// and embedded in each rank-NMP module as the RankCache.

#include <algorithm>
#include <cstdint>
#include <future>
#include <list>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "recnmp/common.hpp"

namespace recnmp {

struct CacheConfig {
  std::uint64_t capacity_bytes = 128 * 1024;
  unsigned line_bytes = 64;
  unsigned ways = 4;
  bool bypass_supported = true;
  bool fully_associative = false;

  std::uint64_t lines() const { return capacity_bytes / line_bytes; }
  unsigned effective_ways() const {
    return fully_associative ? static_cast<unsigned>(lines()) : ways;
  }
  std::uint64_t sets() const { return lines() / effective_ways(); }

  void validate() const {
    if (line_bytes == 0 || !is_pow2(line_bytes)) throw ConfigError("cache.line_bytes must be a power of two");
    if (capacity_bytes == 0 || capacity_bytes % line_bytes != 0)
      throw ConfigError("cache.capacity_bytes must be a positive multiple of line_bytes");
    if (fully_associative) return;
    if (ways == 0 || capacity_bytes % (static_cast<std::uint64_t>(line_bytes) * ways) != 0)
      throw ConfigError("cache.capacity_bytes must be divisible by line_bytes * ways");
    if (!is_pow2(sets())) throw ConfigError("cache: number of sets must be a power of two");
  }

  friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

struct CacheStats {
  std::uint64_t accesses = 0;
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t bypasses = 0;
  std::uint64_t evictions = 0;

  double hit_rate() const { return accesses ? static_cast<double>(hits) / static_cast<double>(accesses) : 0.0; }

  CacheStats& operator+=(const CacheStats& o) {
    accesses += o.accesses;
    hits += o.hits;
    misses += o.misses;
    bypasses += o.bypasses;
    evictions += o.evictions;
    return *this;
  }
  friend bool operator==(const CacheStats&, const CacheStats&) = default;
};

enum class AccessKind { hit, miss, bypassed };

struct AccessOutcome {
  AccessKind kind = AccessKind::miss;
  std::optional<std::uint64_t> evicted;  // line number of the LRU victim
};

class LruCache {
 public:
  explicit LruCache(const CacheConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.fully_associative) {
      index_.reserve(static_cast<std::size_t>(cfg_.lines()));
    } else {
      ways_ = cfg_.ways;
      set_mask_ = cfg_.sets() - 1;
      tags_.assign(static_cast<std::size_t>(cfg_.lines()), kEmpty);
    }
  }

  /// Byte-address access.
  AccessOutcome access(std::uint64_t address, bool cacheable = true) {
    return access_line(address / cfg_.line_bytes, cacheable);
  }

  /// Line-number access. A non-cacheable access leaves the state untouched.
  AccessOutcome access_line(std::uint64_t line, bool cacheable = true) {
    ++stats_.accesses;
    if (!cacheable && cfg_.bypass_supported) {
      ++stats_.bypasses;
      return {AccessKind::bypassed, std::nullopt};
    }
    return cfg_.fully_associative ? access_fa(line) : access_sa(line);
  }

  bool contains_line(std::uint64_t line) const {
    if (cfg_.fully_associative) return index_.count(line) != 0;
    const auto base = (line & set_mask_) * ways_;
    for (unsigned w = 0; w < ways_; ++w)
      if (tags_[base + w] == line) return true;
    return false;
  }

  /// Order-sensitive digest of the resident lines and their LRU ranks.
  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint64_t v) { h = mix64(h ^ v); };
    if (cfg_.fully_associative) {
      for (auto v : lru_) feed(v);
    } else {
      for (auto v : tags_) feed(v);
    }
    return h;
  }

  const CacheStats& stats() const { return stats_; }
  const CacheConfig& config() const { return cfg_; }

 private:
  static constexpr std::uint64_t kEmpty = ~0ULL;

  // Each set is a small MRU-first array.
  AccessOutcome access_sa(std::uint64_t line) {
    const auto base = static_cast<std::size_t>((line & set_mask_) * ways_);
    auto* set = &tags_[base];
    for (unsigned w = 0; w < ways_; ++w) {
      if (set[w] == line) {
        std::rotate(set, set + w, set + w + 1);
        ++stats_.hits;
        return {AccessKind::hit, std::nullopt};
      }
    }
    ++stats_.misses;
    AccessOutcome out{AccessKind::miss, std::nullopt};
    if (set[ways_ - 1] != kEmpty) {
      out.evicted = set[ways_ - 1];
      ++stats_.evictions;
    }
    std::rotate(set, set + ways_ - 1, set + ways_);
    set[0] = line;
    return out;
  }

  AccessOutcome access_fa(std::uint64_t line) {
    auto it = index_.find(line);
    if (it != index_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      ++stats_.hits;
      return {AccessKind::hit, std::nullopt};
    }
    ++stats_.misses;
    AccessOutcome out{AccessKind::miss, std::nullopt};
    if (lru_.size() == cfg_.lines()) {
      out.evicted = lru_.back();
      index_.erase(lru_.back());
      lru_.pop_back();
      ++stats_.evictions;
    }
    lru_.push_front(line);
    index_[line] = lru_.begin();
    return out;
  }

  CacheConfig cfg_;
  CacheStats stats_;
  unsigned ways_ = 0;
  std::uint64_t set_mask_ = 0;
  std::vector<std::uint64_t> tags_;
  std::list<std::uint64_t> lru_;
  std::unordered_map<std::uint64_t, std::list<std::uint64_t>::iterator> index_;
};

struct SweepPoint {
  std::uint64_t capacity_bytes = 0;
  unsigned line_bytes = 0;
  unsigned ways = 0;  // 0 = fully associative
  double hit_rate = 0.0;
  friend bool operator==(const SweepPoint&, const SweepPoint&) = default;
};

inline constexpr std::uint64_t kMiB = 1024ULL * 1024ULL;

namespace detail {

inline SweepPoint simulate_point(std::span<const std::uint64_t> addresses, const CacheConfig& cfg) {
  LruCache cache(cfg);
  for (auto a : addresses) cache.access(a);
  return {cfg.capacity_bytes, cfg.line_bytes, cfg.fully_associative ? 0u : cfg.ways, cache.stats().hit_rate()};
}

inline std::vector<SweepPoint> run_points(std::span<const std::uint64_t> addresses,
                                          const std::vector<CacheConfig>& cfgs) {
  if (addresses.empty()) throw ConfigError("cache sweep: empty address stream");
  for (const auto& c : cfgs) c.validate();
  std::vector<std::future<SweepPoint>> jobs;
  for (const auto& c : cfgs)
    jobs.push_back(std::async(std::launch::async, [addresses, c] { return simulate_point(addresses, c); }));
  std::vector<SweepPoint> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

}  // namespace detail

/// Independent cold-start simulations, one per capacity.
inline std::vector<SweepPoint> sweep_capacity(std::span<const std::uint64_t> addresses,
                                              const std::vector<std::uint64_t>& capacities = {8 * kMiB, 16 * kMiB, 32 * kMiB, 64 * kMiB},
                                              unsigned line_bytes = 64, unsigned ways = 4) {
  std::vector<CacheConfig> cfgs;
  for (auto c : capacities) cfgs.push_back({c, line_bytes, ways, true, false});
  return detail::run_points(addresses, cfgs);
}

/// Line-size sweep at fixed capacity; `fully_associative` isolates conflict misses.
inline std::vector<SweepPoint> sweep_line(std::span<const std::uint64_t> addresses,
                                          const std::vector<unsigned>& lines = {64, 128, 256, 512},
                                          std::uint64_t capacity = 16 * kMiB, unsigned ways = 4,
                                          bool fully_associative = false) {
  std::vector<CacheConfig> cfgs;
  for (auto l : lines) cfgs.push_back({capacity, l, ways, true, fully_associative});
  return detail::run_points(addresses, cfgs);
}

}  // namespace recnmp
