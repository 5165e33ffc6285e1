#pragma once

// Host memory controller with the NMP extension: packet arrival and
// scheduling, hot-entry profiling, intra-packet FR-FCFS, ddr_cmd tagging via
// a shadow RankCache, and the non-NMP host read path.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "recnmp/address_mapping.hpp"
#include "recnmp/cache.hpp"
#include "recnmp/common.hpp"
#include "recnmp/dram_engine.hpp"
#include "recnmp/nmp_isa.hpp"
#include "recnmp/workload.hpp"

namespace recnmp {

enum class SchedulerPolicy { fcfs, table_aware };

inline std::string_view to_string(SchedulerPolicy p) { return p == SchedulerPolicy::fcfs ? "fcfs" : "table_aware"; }

inline SchedulerPolicy parse_scheduler(std::string_view s) {
  if (s == "fcfs") return SchedulerPolicy::fcfs;
  if (s == "table_aware" || s == "table-aware") return SchedulerPolicy::table_aware;
  throw ConfigError("unknown scheduler '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Packet queue

class PacketQueue {
 public:
  explicit PacketQueue(SchedulerPolicy policy) : policy_(policy) {}

  /// Packets pushed with the same arrival stamp arrived together.
  void push(NMPPacket p, std::uint64_t arrival) { pending_.push_back({std::move(p), arrival, seq_++}); }
  void push(NMPPacket p) { push(std::move(p), seq_); }

  bool empty() const { return pending_.empty(); }
  std::size_t size() const { return pending_.size(); }
  SchedulerPolicy policy() const { return policy_; }

  /// Next packet to dispatch; nullopt when the queue is empty.
  std::optional<NMPPacket> schedule_next() {
    if (pending_.empty()) return std::nullopt;
    auto pick = pending_.begin();
    if (policy_ == SchedulerPolicy::table_aware) {
      auto same_group = pending_.end();
      if (last_)
        same_group = std::find_if(pending_.begin(), pending_.end(), [&](const Entry& e) {
          return e.packet.table_id == last_->first && e.packet.batch_id == last_->second;
        });
      if (same_group != pending_.end()) {
        pick = same_group;
      } else {
        // Oldest group; equal arrival stamps break ties on the smaller table_id.
        pick = std::min_element(pending_.begin(), pending_.end(), [](const Entry& a, const Entry& b) {
          return std::tie(a.arrival, a.packet.table_id, a.seq) < std::tie(b.arrival, b.packet.table_id, b.seq);
        });
      }
    }
    NMPPacket out = std::move(pick->packet);
    pending_.erase(pick);
    last_ = {out.table_id, out.batch_id};
    return out;
  }

 private:
  struct Entry {
    NMPPacket packet;
    std::uint64_t arrival;
    std::uint64_t seq;
  };
  SchedulerPolicy policy_;
  std::deque<Entry> pending_;
  std::optional<std::pair<std::uint32_t, std::uint32_t>> last_;
  std::uint64_t seq_ = 0;
};

/// Interleaves per-kernel packet lists the way concurrent host threads would
/// emit them: kernels are taken `host_threads` at a time and, within each
/// window, the next packet comes from a randomly chosen thread.
inline std::vector<NMPPacket> arrival_order(std::vector<std::vector<NMPPacket>> per_kernel, unsigned host_threads,
                                            std::uint64_t seed) {
  if (host_threads == 0) throw ConfigError("host_threads must be >= 1");
  Rng rng(derive_seed(seed, 0xa771));
  std::vector<NMPPacket> out;
  for (std::size_t w = 0; w < per_kernel.size(); w += host_threads) {
    const std::size_t end = std::min(per_kernel.size(), w + host_threads);
    std::vector<std::size_t> live, pos(end - w, 0);
    for (std::size_t k = w; k < end; ++k)
      if (!per_kernel[k].empty()) live.push_back(k);
    while (!live.empty()) {
      const std::size_t li = static_cast<std::size_t>(rng.below(live.size()));
      const std::size_t k = live[li];
      out.push_back(std::move(per_kernel[k][pos[k - w]++]));
      if (pos[k - w] == per_kernel[k].size()) live.erase(live.begin() + static_cast<std::ptrdiff_t>(li));
    }
  }
  return out;
}

/// Drains `arrivals` through a bounded queue of `depth` packets.
inline std::vector<NMPPacket> schedule_packets(std::vector<NMPPacket> arrivals, SchedulerPolicy policy,
                                               std::size_t depth = 64) {
  if (depth == 0) throw ConfigError("packet queue depth must be >= 1");
  PacketQueue q(policy);
  std::vector<NMPPacket> out;
  out.reserve(arrivals.size());
  std::size_t next = 0;
  while (next < arrivals.size() || !q.empty()) {
    while (next < arrivals.size() && q.size() < depth) {
      q.push(std::move(arrivals[next]), next);
      ++next;
    }
    out.push_back(*q.schedule_next());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hot-entry profiling

/// Locality bit per lookup: set iff the (table, row) occurs more than t times
/// within the kernel.
inline LocalityBits profile_hot_entries(const SLSKernel& kernel, std::uint32_t t) {
  if (t < 1) throw ConfigError("profiler threshold t must be >= 1");
  std::map<std::pair<std::uint32_t, std::uint64_t>, std::uint32_t> counts;
  for (const auto& p : kernel.poolings)
    for (auto idx : p.indices) ++counts[{p.table_id, idx}];
  LocalityBits bits;
  bits.reserve(kernel.poolings.size());
  for (const auto& p : kernel.poolings) {
    auto& b = bits.emplace_back(p.indices.size());
    for (std::size_t i = 0; i < p.indices.size(); ++i) b[i] = counts[{p.table_id, p.indices[i]}] > t;
  }
  return bits;
}

/// Hit rate of one cold cache replaying the kernel's lookups with the given
/// bypass hints. Lines are keyed by (table, row, burst).
inline double kernel_hit_rate(const SLSKernel& kernel, const Trace& trace, const LocalityBits& bits,
                              const CacheConfig& cache_cfg) {
  LruCache cache(cache_cfg);
  for (std::size_t pi = 0; pi < kernel.poolings.size(); ++pi) {
    const auto& p = kernel.poolings[pi];
    const unsigned vsize = trace.table(p.table_id).vsize();
    for (std::size_t i = 0; i < p.indices.size(); ++i)
      for (unsigned b = 0; b < vsize; ++b)
        cache.access_line((static_cast<std::uint64_t>(p.table_id) << 40) ^ (p.indices[i] * 4 + b), bits[pi][i]);
  }
  return cache.stats().hit_rate();
}

inline std::uint32_t sweep_threshold(const SLSKernel& kernel, const Trace& trace,
                                     const std::vector<std::uint32_t>& candidates, const CacheConfig& cache_cfg) {
  if (candidates.empty()) throw ConfigError("sweep_threshold: no candidates");
  std::vector<std::uint32_t> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  std::uint32_t best = sorted.front();
  double best_rate = -1.0;
  for (auto t : sorted) {
    const double r = kernel_hit_rate(kernel, trace, profile_hot_entries(kernel, t), cache_cfg);
    if (r > best_rate) best_rate = r, best = t;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Intra-packet FR-FCFS and ddr_cmd tagging

/// Reorders one packet's instructions: the oldest row-buffer hit first,
/// otherwise the oldest instruction. `rows` is the open-row state left by
/// earlier packets and is advanced as if every instruction touched DRAM.
inline void frfcfs_within_packet(NMPPacket& packet, const MappingConfig& m, RowStateTracker rows) {
  const std::size_t n = packet.insts.size();
  if (n < 2) return;
  struct Key {
    unsigned rank, bank;
    std::uint64_t row;
    bool operator<(const Key& o) const { return std::tie(rank, bank, row) < std::tie(o.rank, o.bank, o.row); }
  };
  std::vector<Key> keys(n);
  std::map<Key, std::deque<std::size_t>> by_row;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& inst = packet.insts[i];
    const DramCoord c = unpack_daddr(inst.daddr, inst.rank_id, m);
    keys[i] = {inst.rank_id, c.bank_index(m), c.row};
    by_row[keys[i]].push_back(i);
  }
  // Heads of the row lists that match a currently open row.
  std::set<std::size_t> ready;
  auto head_if_open = [&](unsigned rank, unsigned bank) {
    const auto open = rows.open_row(rank, bank);
    if (!open) return;
    auto it = by_row.find({rank, bank, *open});
    if (it != by_row.end() && !it->second.empty()) ready.insert(it->second.front());
  };
  std::set<std::pair<unsigned, unsigned>> banks;
  for (const auto& k : keys) banks.insert({k.rank, k.bank});
  for (const auto& [r, b] : banks) head_if_open(r, b);

  std::vector<bool> taken(n, false);
  std::size_t oldest = 0;
  std::vector<std::size_t> order;
  order.reserve(n);
  while (order.size() < n) {
    while (taken[oldest]) ++oldest;
    const std::size_t pick = ready.empty() ? oldest : *ready.begin();
    const Key k = keys[pick];
    // Retire the current ready head of this bank, if any.
    if (const auto open = rows.open_row(k.rank, k.bank)) {
      auto it = by_row.find({k.rank, k.bank, *open});
      if (it != by_row.end() && !it->second.empty()) ready.erase(it->second.front());
    }
    auto& lst = by_row[k];
    lst.pop_front();  // pick is always the head of its row list
    taken[pick] = true;
    order.push_back(pick);
    rows.open(k.rank, k.bank, k.row);
    head_if_open(k.rank, k.bank);
  }
  std::vector<NMPInst> insts(n);
  std::vector<std::uint64_t> rws(n);
  for (std::size_t i = 0; i < n; ++i) {
    insts[i] = packet.insts[order[i]];
    if (!packet.rows.empty()) rws[i] = packet.rows[order[i]];
  }
  packet.insts = std::move(insts);
  if (!packet.rows.empty()) packet.rows = std::move(rws);
}

/// Host-side mirror of every rank's RankCache and open rows. Replaying the
/// dispatch-ordered packets through it yields the ddr_cmd tags the ranks need.
class ShadowState {
 public:
  ShadowState(const MappingConfig& m, std::optional<CacheConfig> cache) : m_(m), rows_(m) {
    if (cache)
      for (unsigned r = 0; r < m.total_ranks(); ++r) caches_.emplace_back(*cache);
  }

  const RowStateTracker& rows() const { return rows_; }

  /// Applies FR-FCFS (optional) and assigns ddr_cmd to each instruction.
  void finalize(NMPPacket& packet, bool frfcfs = true) {
    if (frfcfs) frfcfs_within_packet(packet, m_, rows_);
    assign_ddr_cmd_tags(std::span<NMPInst>(packet.insts), m_, rows_, [this](const NMPInst& inst) {
      if (caches_.empty()) return false;
      return cache_lookup(caches_[inst.rank_id], inst);
    });
  }

 private:
  // Same semantics as the rank decoder: every line is accessed, the
  // instruction is served by the cache only if all its lines hit.
  static bool cache_lookup(LruCache& cache, const NMPInst& inst) {
    bool all_hit = true;
    for (unsigned b = 0; b < inst.vsize; ++b)
      all_hit &= cache.access_line(inst.daddr + b, inst.locality).kind == AccessKind::hit;
    return all_hit;
  }

  MappingConfig m_;
  RowStateTracker rows_;
  std::vector<LruCache> caches_;
};

inline void finalize_schedule(std::vector<NMPPacket>& packets, const MappingConfig& m,
                              std::optional<CacheConfig> cache, bool frfcfs = true) {
  ShadowState shadow(m, cache);
  for (auto& p : packets) shadow.finalize(p, frfcfs);
}

// ---------------------------------------------------------------------------
// Host (non-NMP) read path

struct HostRequest {
  DramCoord coord;
  friend bool operator==(const HostRequest&, const HostRequest&) = default;
};

/// One 64B read per burst of every looked-up vector, in trace order.
inline std::vector<HostRequest> host_baseline_stream(const SLSKernel& kernel, const Trace& trace,
                                                     const PageMap& pages, const MappingConfig& m) {
  std::vector<HostRequest> out;
  out.reserve(kernel.lookups());
  for (const auto& p : kernel.poolings) {
    const TableSpec& spec = trace.table(p.table_id);
    for (auto row : p.indices) {
      const std::uint64_t base = pages.row_address(spec, row);
      for (unsigned b = 0; b < spec.vsize(); ++b) out.push_back({phys_to_dram(base + 64ULL * b, m)});
    }
  }
  return out;
}

struct HostResult {
  Cycle cycles = 0;  // last data beat
  std::uint64_t reads = 0;
  std::uint64_t row_hits = 0;
  ChannelStats channel;
  std::vector<IssuedCommand> log;

  /// C/A commands per DQ cycle between the first and last data beat.
  double ca_occupancy() const {
    const Cycle span = channel.last_data_end - channel.first_data;
    return span > 0 ? static_cast<double>(channel.ca_commands) / static_cast<double>(span) : 0.0;
  }
};

struct HostControllerConfig {
  std::size_t queue_depth = 32;
  bool log_commands = false;
};

/// FR-FCFS over a bounded read queue on a shared-bus channel, open-page policy.
inline HostResult run_host(const std::vector<HostRequest>& requests, Channel& ch, const HostControllerConfig& cfg = {}) {
  if (cfg.queue_depth == 0) throw ConfigError("host queue depth must be >= 1");
  const MappingConfig& m = ch.mapping();
  struct Entry {
    std::size_t id;
    DramCoord c;
    unsigned rank, bank;
  };
  std::deque<Entry> q;
  std::size_t next = 0;
  HostResult res;
  Cycle now = 0;
  std::vector<bool> bank_seen;
  const std::size_t nb = static_cast<std::size_t>(m.total_ranks()) * m.banks_per_rank();
  while (next < requests.size() || !q.empty()) {
    while (next < requests.size() && q.size() < cfg.queue_depth) {
      const auto& c = requests[next].coord;
      q.push_back({next, c, c.rank_id(m), c.bank_index(m)});
      ++next;
    }
    // Candidate commands; the row-hit RD class wins over ACT/PRE.
    Cycle best_rd = std::numeric_limits<Cycle>::max(), best_other = best_rd;
    std::size_t rd_pos = q.size(), other_pos = q.size();
    DDRCommand other_cmd;
    bank_seen.assign(nb, false);
    for (std::size_t i = 0; i < q.size(); ++i) {
      const auto& e = q[i];
      const auto open = ch.open_row(e.rank, e.bank);
      if (open && *open == e.c.row) {
        const Cycle t = ch.earliest_issue_cycle({CmdKind::RD, e.c}, now);
        if (t < best_rd) best_rd = t, rd_pos = i;
        continue;
      }
      const std::size_t bk = static_cast<std::size_t>(e.rank) * m.banks_per_rank() + e.bank;
      if (bank_seen[bk]) continue;  // only the oldest request opens a bank
      bank_seen[bk] = true;
      DDRCommand cmd{open ? CmdKind::PRE : CmdKind::ACT, e.c};
      if (open) {
        // Keep the row open while queued requests still hit it.
        bool pending_hit = false;
        for (const auto& o : q)
          if (o.rank == e.rank && o.bank == e.bank && o.c.row == *open) pending_hit = true;
        if (pending_hit) continue;
      }
      const Cycle t = ch.earliest_issue_cycle(cmd, now);
      if (t < best_other) best_other = t, other_pos = i, other_cmd = cmd;
    }
    if (rd_pos < q.size() && best_rd <= now) {
      const auto e = q[rd_pos];
      ch.issue({CmdKind::RD, e.c}, now);
      ++res.reads;
      q.erase(q.begin() + static_cast<std::ptrdiff_t>(rd_pos));
      ++now;
      continue;
    }
    if (other_pos < q.size() && best_other <= now) {
      ch.issue(other_cmd, now);
      ++now;
      continue;
    }
    const Cycle wake = std::min(best_rd, best_other);
    if (wake == std::numeric_limits<Cycle>::max()) throw ProtocolError("host controller deadlock");
    now = std::max(now + 1, wake);
  }
  res.channel = ch.stats();
  res.cycles = res.channel.last_data_end;
  res.row_hits = res.reads - res.channel.total_acts();
  res.log = ch.log();
  return res;
}

}  // namespace recnmp
