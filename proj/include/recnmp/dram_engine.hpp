#pragma once

// DDR4 bank/rank state machines with DDR4-2400 timing. One Channel instance
// models one channel; the host path shares one C/A and one DQ bus across all
// ranks, the NMP path gives each rank its own local buses.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "recnmp/address_mapping.hpp"
#include "recnmp/common.hpp"
#include "recnmp/nmp_isa.hpp"

namespace recnmp {

struct TimingParams {
  Cycle tRC = 55, tRCD = 16, tCL = 16, tRP = 16, tBL = 4;
  Cycle tCCD_S = 4, tCCD_L = 6, tRRD_S = 4, tRRD_L = 6, tFAW = 26;
  Cycle tRTP = 9;  // DDR4-2400 read-to-precharge

  Cycle tRAS() const { return tRC - tRP; }

  void validate() const {
    for (Cycle v : {tRC, tRCD, tCL, tRP, tBL, tCCD_S, tCCD_L, tRRD_S, tRRD_L, tFAW, tRTP})
      if (v <= 0) throw ConfigError("timing parameters must be positive");
    if (tRC < tRCD + tRP) throw ConfigError("timing: tRC must be >= tRCD + tRP");
    if (tCCD_L < tCCD_S) throw ConfigError("timing: tCCD_L must be >= tCCD_S");
    if (tRRD_L < tRRD_S) throw ConfigError("timing: tRRD_L must be >= tRRD_S");
  }
  friend bool operator==(const TimingParams&, const TimingParams&) = default;
};

/// Periodic per-rank unavailability standing in for auto-refresh. Rank r is
/// blacked out during [k*tREFI + off_r, k*tREFI + off_r + tRFC), with off_r = 0
/// for all ranks unless staggered (then off_r = r*tREFI/ranks).
/// Open rows survive a blackout.
struct RefreshParams {
  bool enabled = false;
  bool staggered = false;
  Cycle tREFI = 9360;  // 7.8 us
  Cycle tRFC = 420;    // 350 ns

  void validate() const {
    if (enabled && (tREFI <= 0 || tRFC <= 0 || tRFC >= tREFI))
      throw ConfigError("refresh: need 0 < tRFC < tREFI");
  }
  friend bool operator==(const RefreshParams&, const RefreshParams&) = default;
};

enum class BusTopology { shared_channel, per_rank };

struct IssuedCommand {
  Cycle cycle = 0;
  CmdKind kind = CmdKind::RD;
  unsigned rank = 0;  // rank_id
  unsigned bank_group = 0;
  unsigned bank = 0;
  std::uint64_t row = 0;
  unsigned column = 0;
  friend bool operator==(const IssuedCommand&, const IssuedCommand&) = default;
};

inline void write_command_csv(const std::vector<IssuedCommand>& log, std::ostream& os) {
  os << "cycle,kind,rank,bg,bank,row,col\n";
  for (const auto& c : log)
    os << c.cycle << ',' << to_string(c.kind) << ',' << c.rank << ',' << c.bank_group << ',' << c.bank << ','
       << c.row << ',' << c.column << '\n';
}

struct ChannelStats {
  std::vector<std::uint64_t> acts, reads, pres;  // per rank_id
  std::uint64_t ca_commands = 0;
  Cycle first_data = -1;  // first DQ burst start
  Cycle last_data_end = 0;
  std::uint64_t dq_busy_cycles = 0;

  std::uint64_t total_acts() const { return sum(acts); }
  std::uint64_t total_reads() const { return sum(reads); }
  std::uint64_t total_pres() const { return sum(pres); }

 private:
  static std::uint64_t sum(const std::vector<std::uint64_t>& v) {
    std::uint64_t s = 0;
    for (auto x : v) s += x;
    return s;
  }
};

class Channel {
 public:
  static constexpr Cycle kNever = -(Cycle{1} << 40);

  Channel(const MappingConfig& m, const TimingParams& t, BusTopology topo, const RefreshParams& refresh = {},
          bool log_commands = false)
      : m_(m), t_(t), topo_(topo), refresh_(refresh), log_enabled_(log_commands) {
    t_.validate();
    refresh_.validate();
    const unsigned ranks = m_.total_ranks();
    const unsigned banks = m_.banks_per_rank();
    banks_.assign(static_cast<std::size_t>(ranks) * banks, Bank{});
    ranks_.assign(ranks, RankState{});
    for (auto& r : ranks_) r.last_act_bg.assign(m_.bank_groups, kNever), r.last_rd_bg.assign(m_.bank_groups, kNever);
    buses_.assign(topo_ == BusTopology::shared_channel ? 1 : ranks, Bus{});
    stats_.acts.assign(ranks, 0);
    stats_.reads.assign(ranks, 0);
    stats_.pres.assign(ranks, 0);
  }

  /// Row currently open in a bank, if any.
  std::optional<std::uint64_t> open_row(unsigned rank_id, unsigned bank_index) const {
    return bank(rank_id, bank_index).open;
  }

  /// Smallest cycle >= now at which `cmd` satisfies every timing constraint.
  /// Throws ProtocolError when the command is illegal for the bank state.
  Cycle earliest_issue_cycle(const DDRCommand& cmd, Cycle now) const {
    const unsigned r = cmd.coord.rank_id(m_);
    const unsigned b = cmd.coord.bank_index(m_);
    const unsigned bg = cmd.coord.bank_group;
    const Bank& bk = bank(r, b);
    const RankState& rs = ranks_[r];
    const Bus& bus = buses_[bus_of(r)];
    Cycle t = std::max(now, bus.last_cmd + 1);
    switch (cmd.kind) {
      case CmdKind::ACT: {
        if (bk.open) throw ProtocolError("ACT to a bank with an open row");
        t = std::max({t, bk.last_pre + t_.tRP, bk.last_act + t_.tRC});
        for (unsigned g = 0; g < m_.bank_groups; ++g)
          t = std::max(t, rs.last_act_bg[g] + (g == bg ? t_.tRRD_L : t_.tRRD_S));
        if (rs.act_window.size() == 4) t = std::max(t, rs.act_window.front() + t_.tFAW);
        break;
      }
      case CmdKind::RD: {
        if (!bk.open || *bk.open != cmd.coord.row) throw ProtocolError("RD to a closed or different row");
        t = std::max(t, bk.last_act + t_.tRCD);
        for (unsigned g = 0; g < m_.bank_groups; ++g)
          t = std::max(t, rs.last_rd_bg[g] + (g == bg ? t_.tCCD_L : t_.tCCD_S));
        t = std::max(t, bus.dq_free - t_.tCL);
        break;
      }
      case CmdKind::PRE: {
        if (!bk.open) throw ProtocolError("PRE to a precharged bank");
        t = std::max({t, bk.last_act + t_.tRAS(), bk.last_rd + t_.tRTP});
        break;
      }
    }
    return skip_refresh(r, t);
  }

  /// Applies a command. Returns the data-bus start cycle for RD, otherwise the
  /// issue cycle. Violations are simulator bugs and throw ProtocolError.
  Cycle issue(const DDRCommand& cmd, Cycle cycle) {
    if (earliest_issue_cycle(cmd, cycle) != cycle) throw ProtocolError("command issued before it is legal");
    const unsigned r = cmd.coord.rank_id(m_);
    const unsigned b = cmd.coord.bank_index(m_);
    const unsigned bg = cmd.coord.bank_group;
    Bank& bk = bank(r, b);
    RankState& rs = ranks_[r];
    Bus& bus = buses_[bus_of(r)];
    bus.last_cmd = cycle;
    ++stats_.ca_commands;
    Cycle result = cycle;
    switch (cmd.kind) {
      case CmdKind::ACT:
        bk.open = cmd.coord.row;
        bk.last_act = cycle;
        rs.last_act_bg[bg] = cycle;
        rs.act_window.push_back(cycle);
        if (rs.act_window.size() > 4) rs.act_window.pop_front();
        ++stats_.acts[r];
        break;
      case CmdKind::RD:
        bk.last_rd = cycle;
        rs.last_rd_bg[bg] = cycle;
        result = cycle + t_.tCL;
        bus.dq_free = result + t_.tBL;
        if (stats_.first_data < 0) stats_.first_data = result;
        stats_.last_data_end = std::max(stats_.last_data_end, result + t_.tBL);
        stats_.dq_busy_cycles += static_cast<std::uint64_t>(t_.tBL);
        ++stats_.reads[r];
        break;
      case CmdKind::PRE:
        bk.open.reset();
        bk.last_pre = cycle;
        ++stats_.pres[r];
        break;
    }
    if (log_enabled_)
      log_.push_back({cycle, cmd.kind, r, cmd.coord.bank_group, cmd.coord.bank, cmd.coord.row, cmd.coord.column});
    return result;
  }

  /// Opens `row` in a bank outside of timing (test setup / warm state).
  void preopen(unsigned rank_id, unsigned bank_index, std::uint64_t row) { bank(rank_id, bank_index).open = row; }

  bool in_refresh(unsigned rank_id, Cycle c) const {
    if (!refresh_.enabled || c < 0) return false;
    const Cycle phase = (c - offset(rank_id)) % refresh_.tREFI;
    const Cycle p = phase < 0 ? phase + refresh_.tREFI : phase;
    return p < refresh_.tRFC;
  }

  const ChannelStats& stats() const { return stats_; }
  const std::vector<IssuedCommand>& log() const { return log_; }
  const TimingParams& timing() const { return t_; }
  const MappingConfig& mapping() const { return m_; }
  BusTopology topology() const { return topo_; }
  const RefreshParams& refresh() const { return refresh_; }

 private:
  struct Bank {
    std::optional<std::uint64_t> open;
    Cycle last_act = kNever, last_rd = kNever, last_pre = kNever;
  };
  struct RankState {
    std::vector<Cycle> last_act_bg, last_rd_bg;
    std::deque<Cycle> act_window;
  };
  struct Bus {
    Cycle last_cmd = kNever;
    Cycle dq_free = 0;
  };

  Bank& bank(unsigned r, unsigned b) { return banks_[static_cast<std::size_t>(r) * m_.banks_per_rank() + b]; }
  const Bank& bank(unsigned r, unsigned b) const {
    return banks_[static_cast<std::size_t>(r) * m_.banks_per_rank() + b];
  }
  unsigned bus_of(unsigned r) const { return topo_ == BusTopology::shared_channel ? 0 : r; }
  Cycle offset(unsigned r) const { return refresh_.staggered ? refresh_.tREFI * r / m_.total_ranks() : 0; }

  Cycle skip_refresh(unsigned r, Cycle t) const {
    if (!in_refresh(r, t)) return t;
    const Cycle phase = ((t - offset(r)) % refresh_.tREFI + refresh_.tREFI) % refresh_.tREFI;
    return t + (refresh_.tRFC - phase);
  }

  MappingConfig m_;
  TimingParams t_;
  BusTopology topo_;
  RefreshParams refresh_;
  bool log_enabled_;
  std::vector<Bank> banks_;
  std::vector<RankState> ranks_;
  std::vector<Bus> buses_;
  ChannelStats stats_;
  std::vector<IssuedCommand> log_;
};

}  // namespace recnmp
