#pragma once

// RecNMP processing unit: per-rank decoders with RankCache and the
// multiply/accumulate pipeline, plus the DIMM adder tree. Timing and the
// functional datapath are modeled separately; both consume the same
// dispatch-ordered packets.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include "recnmp/address_mapping.hpp"
#include "recnmp/cache.hpp"
#include "recnmp/common.hpp"
#include "recnmp/dram_engine.hpp"
#include "recnmp/nmp_isa.hpp"
#include "recnmp/workload.hpp"

namespace recnmp {

struct PipelineLatency {
  Cycle mult = 4;
  Cycle add = 3;
  Cycle init = 2;      // counter / vsize register writes per packet
  Cycle transfer = 1;  // final sum to host
  friend bool operator==(const PipelineLatency&, const PipelineLatency&) = default;
};

/// When a packet gives up a rank: after its last instruction for that rank
/// crossed the C/A bus, or only once the whole packet completed.
enum class RankRelease { on_sent, on_completion };

/// How the controller shares the C/A slots of one clock among ranks.
enum class CaArbiter { most_remaining, round_robin };

struct NmpConfig {
  bool cache_enabled = true;
  CacheConfig cache;
  /// (capacity_bytes, cycles) steps: the latency of the largest entry whose
  /// capacity does not exceed the cache capacity. Empty means 1 cycle.
  std::vector<std::pair<std::uint64_t, Cycle>> cache_latency_table;
  unsigned fifo_depth = 16;
  unsigned ca_insts_per_cycle = 2;
  CaArbiter ca_arbiter = CaArbiter::most_remaining;
  RankRelease rank_release = RankRelease::on_sent;
  unsigned dispatch_window = 64;
  PipelineLatency latency;
  RefreshParams refresh;
  bool log_commands = false;

  Cycle cache_latency() const {
    Cycle lat = 1;
    for (const auto& [cap, l] : cache_latency_table)
      if (cap <= cache.capacity_bytes) lat = l;
    return lat;
  }

  void validate() const {
    if (cache_enabled) cache.validate();
    if (fifo_depth == 0) throw ConfigError("nmp.fifo_depth must be >= 1");
    if (ca_insts_per_cycle == 0) throw ConfigError("nmp.ca_insts_per_cycle must be >= 1");
    if (dispatch_window == 0) throw ConfigError("nmp.dispatch_window must be >= 1");
    for (const auto& [cap, l] : cache_latency_table)
      if (l < 1) throw ConfigError("cache latency entries must be >= 1 cycle");
  }
};

/// Latency-growth table used to show the large-cache penalty: one extra
/// cycle per doubling beyond 128KB.
inline std::vector<std::pair<std::uint64_t, Cycle>> default_latency_growth() {
  return {{8 * 1024, 1}, {256 * 1024, 2}, {512 * 1024, 3}, {1024 * 1024, 4}, {2048 * 1024, 5}};
}

struct RankStats {
  std::uint64_t insts = 0;
  std::uint64_t dram_reads = 0;
  std::uint64_t acts = 0;
  CacheStats cache;
  Cycle busy_cycles = 0;  // sum over packets of (rank finish - packet dispatch)
};

struct PuStats {
  std::vector<RankStats> ranks;
  std::vector<Cycle> packet_completion;  // in dispatch order
  std::vector<Cycle> packet_dispatch;
  std::uint64_t insts = 0;
  std::uint64_t sum_vectors_out = 0;  // (packet, tag, dimm) partial sums sent to the host
  std::uint64_t sum_bits_out = 0;
  std::uint64_t tree_adds = 0;  // element-wise adds in DIMM adder trees

  CacheStats cache_total() const {
    CacheStats s;
    for (const auto& r : ranks) s += r.cache;
    return s;
  }
};

struct NmpResult {
  Cycle cycles = 0;
  PuStats pu;
  ChannelStats channel;
  std::vector<IssuedCommand> log;
};

inline unsigned tree_levels(unsigned ranks_per_dimm) {
  return ranks_per_dimm <= 1 ? 0u : static_cast<unsigned>(std::bit_width(ranks_per_dimm - 1));
}

/// Cycle-level model of one channel of RecNMP DIMMs.
///
/// A packet claims every rank it touches at dispatch and gives each one up per
/// NmpConfig::rank_release. Packets leave the controller in schedule order,
/// except that a later packet may go ahead when it shares no rank with any
/// earlier waiting packet.
class NmpSimulator {
 public:
  NmpSimulator(const MappingConfig& m, const TimingParams& t, const NmpConfig& cfg) : m_(m), t_(t), cfg_(cfg) {
    cfg_.validate();
    t_.validate();
    if (m_.banks_per_rank() > 32) throw ConfigError("at most 32 banks per rank");
    if (m_.total_ranks() > 8) throw ConfigError("at most 8 ranks per channel");
  }

  NmpResult run(const std::vector<NMPPacket>& packets) {
    Channel ch(m_, t_, BusTopology::per_rank, cfg_.refresh, cfg_.log_commands);
    const unsigned R = m_.total_ranks();
    const Cycle cache_lat = cfg_.cache_latency();
    const Cycle pipe = cfg_.latency.mult + cfg_.latency.add;

    std::vector<RankUnit> ranks(R);
    if (cfg_.cache_enabled)
      for (auto& r : ranks) r.cache.emplace(cfg_.cache);

    const std::size_t P = packets.size();
    std::vector<PacketRun> runs(P);
    for (std::size_t p = 0; p < P; ++p) {
      auto& run = runs[p];
      run.per_rank.resize(R);
      run.rank_finish.assign(R, -1);
      run.sent.assign(R, 0);
      for (std::size_t i = 0; i < packets[p].insts.size(); ++i) {
        const auto r = packets[p].insts[i].rank_id;
        if (r >= R) throw ProtocolError("inst rank_id beyond configured ranks");
        run.per_rank[r].push_back(i);
      }
      run.remaining = packets[p].insts.size();
      for (unsigned r = 0; r < R; ++r)
        if (!run.per_rank[r].empty()) run.mask |= 1u << r;
    }

    NmpResult res;
    res.pu.ranks.assign(R, {});
    res.pu.packet_completion.assign(P, -1);
    res.pu.packet_dispatch.assign(P, -1);
    std::vector<long> owner(R, -1);
    std::size_t first_waiting = 0;
    std::size_t completed = 0;
    std::vector<std::pair<Cycle, std::size_t>> releases;  // (cycle, packet)
    unsigned rr = 0;
    Cycle now = 0;

    auto finish_inst = [&](std::size_t p, unsigned r, Cycle done) {
      auto& run = runs[p];
      run.rank_finish[r] = std::max(run.rank_finish[r], done);
      if (--run.remaining == 0) {
        Cycle end = 0;
        for (unsigned d = 0; d < m_.dimms_per_channel; ++d) {
          Cycle dimm_end = -1;
          for (unsigned k = 0; k < m_.ranks_per_dimm; ++k)
            dimm_end = std::max(dimm_end, run.rank_finish[d * m_.ranks_per_dimm + k]);
          if (dimm_end >= 0) end = std::max(end, dimm_end + 3 * static_cast<Cycle>(tree_levels(m_.ranks_per_dimm)));
        }
        const Cycle completion = std::max(end, run.dispatch + cfg_.latency.init) + cfg_.latency.transfer;
        res.pu.packet_completion[p] = completion;
        for (unsigned rk = 0; rk < R; ++rk)
          if (run.rank_finish[rk] >= 0) res.pu.ranks[rk].busy_cycles += run.rank_finish[rk] - run.dispatch;
        releases.push_back({completion, p});
      }
    };

    auto resolve_waiters = [&](RankUnit& ru, unsigned r, std::uint64_t line, Cycle ready) {
      auto it = ru.waiters.find(line);
      if (it == ru.waiters.end()) return;
      auto waiting = std::move(it->second);
      ru.waiters.erase(it);
      for (auto id : waiting) {
        auto& e = ru.entry(id);
        e.data_ready = std::max(e.data_ready, ready);
        if (--e.pending_fills == 0) {
          finish_inst(e.packet, r, e.data_ready + pipe);
          e.state = State::done;
        }
      }
    };

    while (completed < P) {
      bool progress = false;
      Cycle wake = std::numeric_limits<Cycle>::max();

      // 1. Release ranks of completed packets.
      for (std::size_t i = 0; i < releases.size();) {
        if (releases[i].first <= now) {
          const auto p = releases[i].second;
          for (unsigned r = 0; r < R; ++r)
            if (owner[r] == static_cast<long>(p)) owner[r] = -1;
          ++completed;
          releases[i] = releases.back();
          releases.pop_back();
          progress = true;
        } else {
          wake = std::min(wake, releases[i].first);
          ++i;
        }
      }

      // 2. Dispatch.
      while (first_waiting < P && runs[first_waiting].dispatched) ++first_waiting;
      std::uint32_t blocked = 0;
      for (std::size_t p = first_waiting, seen = 0; p < P && seen < cfg_.dispatch_window; ++p) {
        auto& run = runs[p];
        if (run.dispatched) continue;
        ++seen;
        bool free = (run.mask & blocked) == 0;
        for (unsigned r = 0; free && r < R; ++r)
          if ((run.mask >> r & 1u) && owner[r] >= 0) free = false;
        if (free) {
          run.dispatched = true;
          run.dispatch = now;
          res.pu.packet_dispatch[p] = now;
          for (unsigned r = 0; r < R; ++r)
            if (run.mask >> r & 1u) owner[r] = static_cast<long>(p);
          if (run.remaining == 0) {
            const Cycle completion = now + cfg_.latency.init + cfg_.latency.transfer;
            res.pu.packet_completion[p] = completion;
            releases.push_back({completion, p});
            wake = std::min(wake, completion);
          }
          progress = true;
        }
        blocked |= run.mask;
        if (blocked == (R >= 32 ? ~0u : (1u << R) - 1)) break;
      }

      // 3. C/A: at most ca_insts_per_cycle instructions cross per clock.
      // Each slot goes to the eligible rank with the most instructions left
      // to send (the packet's critical rank), ties in round-robin order.
      for (unsigned slot = 0; slot < cfg_.ca_insts_per_cycle; ++slot) {
        long best = -1;
        std::size_t best_left = 0;
        for (unsigned k = 0; k < R; ++k) {
          const unsigned r = (rr + k) % R;
          if (owner[r] < 0) continue;
          const auto& run = runs[static_cast<std::size_t>(owner[r])];
          if (run.sent[r] >= run.per_rank[r].size()) continue;
          if (run.dispatch + cfg_.latency.init > now) {
            wake = std::min(wake, run.dispatch + cfg_.latency.init);
            continue;
          }
          if (ranks[r].fifo.size() >= cfg_.fifo_depth) continue;
          std::size_t left = run.per_rank[r].size() - run.sent[r];
          if (cfg_.ca_arbiter == CaArbiter::round_robin) left = 1;
          if (best < 0 || left > best_left) best = r, best_left = left;
        }
        if (best < 0) break;
        const auto r = static_cast<unsigned>(best);
        const auto p = static_cast<std::size_t>(owner[r]);
        auto& run = runs[p];
        ranks[r].push(p, run.per_rank[r][run.sent[r]++], now);
        ++res.pu.ranks[r].insts;
        ++res.pu.insts;
        progress = true;
        if (cfg_.ca_arbiter == CaArbiter::round_robin) rr = (r + 1) % R;
        if (cfg_.rank_release == RankRelease::on_sent && run.sent[r] == run.per_rank[r].size()) owner[r] = -1;
      }
      if (cfg_.ca_arbiter == CaArbiter::most_remaining) rr = (rr + 1) % R;

      // 4. Per-rank decode, cache lookup, and DRAM command issue.
      for (unsigned r = 0; r < R; ++r) {
        auto& ru = ranks[r];
        // Lookup stage: in FIFO order, one instruction per free cache port.
        if (ru.lookup_pos < ru.fifo.size()) {
          auto& e = ru.entry(ru.fifo[ru.lookup_pos]);
          const Cycle ready_at = std::max(e.arrival + 1, ru.port_free);
          if (ready_at <= now) {
            ++ru.lookup_pos;
            progress = true;
            const NMPInst& inst = packets[e.packet].insts[e.inst];
            bool served = false;
            if (ru.cache) {
              ru.port_free = now + cache_lat;
              bool all_hit = true;
              std::vector<std::uint64_t> lines;
              for (unsigned b = 0; b < inst.vsize; ++b) {
                const auto out = ru.cache->access_line(inst.daddr + b, inst.locality);
                all_hit &= out.kind == AccessKind::hit;
                lines.push_back(inst.daddr + b);
              }
              if (all_hit) {
                served = true;
                e.state = State::wait_fill;
                e.data_ready = now + cache_lat;
                for (auto line : lines) {
                  auto f = ru.fills.find(line);
                  if (f == ru.fills.end()) continue;
                  if (f->second < 0) {
                    ++e.pending_fills;
                    ru.waiters[line].push_back(e.id);
                  } else {
                    e.data_ready = std::max(e.data_ready, f->second);
                  }
                }
                if (e.pending_fills == 0) {
                  finish_inst(e.packet, r, e.data_ready + pipe);
                  e.state = State::done;
                }
              } else if (inst.locality) {
                for (auto line : lines) ru.fills[line] = -1;
                e.fill_lines = std::move(lines);
              }
            } else {
              ru.port_free = now + 1;
            }
            if (!served) {
              if (!(inst.ddr_cmd & ddr_cmd::RD))
                throw ProtocolError("instruction needs DRAM data but carries no RD tag");
              e.cmds = expand_to_ddr(inst, m_);
              e.state = State::dram;
            }
          } else {
            wake = std::min(wake, ready_at);
          }
        }

        // DRAM: oldest issuable command, in order within each bank.
        std::uint32_t bank_busy_lo = 0;  // up to 32 banks per rank
        std::optional<std::size_t> pick;
        Cycle pick_t = 0;
        for (std::size_t k = 0; k < ru.lookup_pos; ++k) {
          auto& e = ru.entry(ru.fifo[k]);
          if (e.state != State::dram) continue;
          const auto& cmd = e.cmds[e.cmd_pos];
          const unsigned b = cmd.coord.bank_index(m_);
          if (bank_busy_lo >> b & 1u) continue;
          bank_busy_lo |= 1u << b;
          const Cycle t = ch.earliest_issue_cycle(cmd, now);
          if (t <= now) {
            pick = k;
            pick_t = t;
            break;
          }
          wake = std::min(wake, t);
        }
        if (pick) {
          progress = true;
          auto& e = ru.entry(ru.fifo[*pick]);
          const auto& cmd = e.cmds[e.cmd_pos];
          const Cycle data = ch.issue(cmd, pick_t);
          if (cmd.kind == CmdKind::RD) {
            ++res.pu.ranks[r].dram_reads;
            e.data_ready = std::max(e.data_ready, data + t_.tBL);
          } else if (cmd.kind == CmdKind::ACT) {
            ++res.pu.ranks[r].acts;
          }
          if (++e.cmd_pos == e.cmds.size()) {
            e.state = State::done;
            finish_inst(e.packet, r, e.data_ready + pipe);
            for (auto line : e.fill_lines) {
              ru.fills[line] = e.data_ready;
              resolve_waiters(ru, r, line, e.data_ready);
            }
          }
        }

        // Finished entries free their FIFO slot.
        for (std::size_t k = 0; k < ru.lookup_pos;) {
          auto& e = ru.entry(ru.fifo[k]);
          if (e.state == State::done) {
            ru.pool.erase(e.id);
            ru.fifo.erase(ru.fifo.begin() + static_cast<std::ptrdiff_t>(k));
            --ru.lookup_pos;
          } else {
            ++k;
          }
        }
        if (ru.fills.size() > 65536)
          std::erase_if(ru.fills, [now](const auto& kv) { return kv.second >= 0 && kv.second <= now; });
      }

      if (completed == P) break;
      if (progress || wake == std::numeric_limits<Cycle>::max()) {
        if (!progress && releases.empty()) throw ProtocolError("NMP simulator deadlock");
        ++now;
      } else {
        now = std::max(now + 1, wake);
      }
    }

    for (unsigned r = 0; r < R; ++r)
      if (ranks[r].cache) res.pu.ranks[r].cache = ranks[r].cache->stats();
    for (const auto& c : res.pu.packet_completion) res.cycles = std::max(res.cycles, c);
    account_outputs(packets, res.pu);
    res.channel = ch.stats();
    res.log = ch.log();
    return res;
  }

 private:
  enum class State { lookup, wait_fill, dram, done };

  struct Entry {
    std::uint64_t id = 0;
    std::size_t packet = 0;
    std::size_t inst = 0;
    Cycle arrival = 0;
    State state = State::lookup;
    std::vector<DDRCommand> cmds;
    std::size_t cmd_pos = 0;
    Cycle data_ready = 0;
    unsigned pending_fills = 0;
    std::vector<std::uint64_t> fill_lines;
  };

  struct RankUnit {
    std::optional<LruCache> cache;
    std::deque<std::uint64_t> fifo;  // entry ids
    std::size_t lookup_pos = 0;      // fifo[0, lookup_pos) have been looked up
    Cycle port_free = 0;
    std::unordered_map<std::uint64_t, Entry> pool;
    std::unordered_map<std::uint64_t, Cycle> fills;  // line -> data ready, -1 while in flight
    std::unordered_map<std::uint64_t, std::vector<std::uint64_t>> waiters;
    std::uint64_t next_id = 0;

    Entry& entry(std::uint64_t id) { return pool.at(id); }
    void push(std::size_t p, std::size_t i, Cycle now) {
      Entry e;
      e.id = next_id++;
      e.packet = p;
      e.inst = i;
      e.arrival = now;
      pool.emplace(e.id, std::move(e));
      fifo.push_back(next_id - 1);
    }
  };

  struct PacketRun {
    std::vector<std::vector<std::size_t>> per_rank;
    std::vector<std::size_t> sent;
    std::vector<Cycle> rank_finish;
    std::uint32_t mask = 0;
    std::size_t remaining = 0;
    bool dispatched = false;
    Cycle dispatch = 0;
  };

  void account_outputs(const std::vector<NMPPacket>& packets, PuStats& pu) const {
    for (const auto& p : packets) {
      for (unsigned tag = 0; tag < p.num_tags; ++tag) {
        for (unsigned d = 0; d < m_.dimms_per_channel; ++d) {
          unsigned contributors = 0;
          for (unsigned k = 0; k < m_.ranks_per_dimm; ++k) {
            const unsigned r = d * m_.ranks_per_dimm + k;
            for (const auto& inst : p.insts)
              if (inst.rank_id == r && inst.psum_tag == tag) {
                ++contributors;
                break;
              }
          }
          if (contributors == 0) continue;
          ++pu.sum_vectors_out;
          pu.sum_bits_out += 32ULL * p.elements;
          pu.tree_adds += static_cast<std::uint64_t>(contributors - 1) * p.elements;
        }
      }
    }
  }

  MappingConfig m_;
  TimingParams t_;
  NmpConfig cfg_;
};

// ---------------------------------------------------------------------------
// Functional datapath

/// Elementwise fp32 tree over the contributing ranks in ascending rank order.
/// Throws when an expected contributor is missing.
inline std::vector<float> dimm_reduce(const std::map<unsigned, std::vector<float>>& psums,
                                      const std::vector<unsigned>& expected_ranks = {}) {
  for (auto r : expected_ranks)
    if (!psums.count(r)) throw ProtocolError("dimm_reduce: missing psum from rank " + std::to_string(r));
  if (psums.empty()) throw ProtocolError("dimm_reduce: no contributors");
  std::vector<std::vector<float>> level;
  for (const auto& [r, v] : psums) level.push_back(v);
  while (level.size() > 1) {
    std::vector<std::vector<float>> up;
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
      auto s = level[i];
      if (s.size() != level[i + 1].size()) throw ProtocolError("dimm_reduce: psum length mismatch");
      for (std::size_t e = 0; e < s.size(); ++e) s[e] += level[i + 1][e];
      up.push_back(std::move(s));
    }
    if (level.size() % 2) up.push_back(level.back());
    level = std::move(up);
  }
  return level.front();
}

struct PacketSums {
  /// Final vector per psum tag, summed over DIMMs in ascending order.
  std::vector<std::vector<float>> per_tag;
  /// Per-(rank, tag) accumulations performed; equals packet counters summed over ranks.
  std::vector<std::uint32_t> decrements;
};

/// Executes a packet's arithmetic the way the rank modules do: each rank
/// accumulates w * (scalar * q + bias) into its psum register in arrival order,
/// a tag's psum is released exactly when its rank-local counter reaches zero,
/// then each DIMM reduces its ranks and the host adds the DIMM sums.
/// `table_for(table_id)` must return an EmbeddingValues model.
template <class TableFor>
PacketSums execute_packet(const NMPPacket& p, const MappingConfig& m, TableFor&& table_for) {
  if (p.rows.size() != p.insts.size()) throw ProtocolError("packet lacks row metadata for functional execution");
  const auto& table = table_for(p.table_id);
  const std::uint32_t dim = p.elements;
  if (table.dim() != dim) throw ProtocolError("vsize/table mismatch");
  const unsigned R = m.total_ranks();

  // Controller-programmed rank-local counters.
  std::vector<std::array<std::uint32_t, kMaxPsumTags>> counters(R);
  for (auto& c : counters) c.fill(0);
  for (const auto& inst : p.insts) ++counters.at(inst.rank_id)[inst.psum_tag];

  std::vector<std::array<std::vector<float>, kMaxPsumTags>> regs(R);
  std::vector<std::map<unsigned, std::vector<float>>> emitted(kMaxPsumTags);  // tag -> rank -> psum
  PacketSums out;
  out.decrements.assign(kMaxPsumTags, 0);

  for (std::size_t i = 0; i < p.insts.size(); ++i) {
    const auto& inst = p.insts[i];
    auto& cnt = counters[inst.rank_id][inst.psum_tag];
    if (cnt == 0) throw ProtocolError("psum counter underflow");
    auto& reg = regs[inst.rank_id][inst.psum_tag];
    if (reg.empty()) reg.assign(dim, 0.0f);
    const auto row = p.rows[i];
    const bool quant = table.dtype() == DType::int8q;
    const QuantParams qp = quant ? table.quant(row) : QuantParams{};
    for (std::uint32_t e = 0; e < dim; ++e) {
      const float x = quant ? qp.scalar * static_cast<float>(table.code(row, e)) + qp.bias : table.value(row, e);
      reg[e] += inst.weight * x;
    }
    ++out.decrements[inst.psum_tag];
    if (--cnt == 0) {
      if (emitted[inst.psum_tag].count(inst.rank_id)) throw ProtocolError("psum emitted twice");
      emitted[inst.psum_tag][inst.rank_id] = std::move(reg);
      reg.clear();
    }
  }
  for (unsigned r = 0; r < R; ++r)
    for (unsigned t = 0; t < kMaxPsumTags; ++t)
      if (counters[r][t] != 0) throw ProtocolError("psum counter not drained");

  out.per_tag.resize(p.num_tags);
  for (unsigned tag = 0; tag < p.num_tags; ++tag) {
    std::vector<float> total(dim, 0.0f);
    for (unsigned d = 0; d < m.dimms_per_channel; ++d) {
      std::map<unsigned, std::vector<float>> mine;
      for (auto& [r, v] : emitted[tag])
        if (r / m.ranks_per_dimm == d) mine.emplace(r, v);
      if (mine.empty()) continue;
      const auto s = dimm_reduce(mine);
      for (std::uint32_t e = 0; e < dim; ++e) total[e] += s[e];
    }
    out.per_tag[tag] = std::move(total);
  }
  return out;
}

}  // namespace recnmp
