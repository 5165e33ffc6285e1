#pragma once

// 79-bit NMP instructions, NMP packets, and their expansion into DDR commands.
//
// Bit layout (MSB first):
//
//   [78:76] ddr_cmd   ACT | RD | PRE presence bits (bit 78 = ACT, 76 = PRE)
//   [75:74] vsize     burst count - 1 (1..4 x 64B)
//   [73:40] daddr     34-bit rank-local block address
//   [39: 8] weight    IEEE-754 fp32
//   [    7] locality  1 = cache in RankCache, 0 = bypass
//   [ 6: 3] psum_tag
//   [ 2: 0] rank_id

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "recnmp/address_mapping.hpp"
#include "recnmp/common.hpp"
#include "recnmp/workload.hpp"

namespace recnmp {

namespace ddr_cmd {
inline constexpr std::uint8_t PRE = 0b001;
inline constexpr std::uint8_t RD = 0b010;
inline constexpr std::uint8_t ACT = 0b100;
}  // namespace ddr_cmd

struct InstLayout {
  static constexpr unsigned ddr_cmd = 3, vsize = 2, daddr = 34, weight = 32, locality = 1, psum_tag = 4, rank_id = 3;
  static constexpr unsigned total = ddr_cmd + vsize + daddr + weight + locality + psum_tag + rank_id;
  // LSB positions
  static constexpr unsigned rank_id_lsb = 0;
  static constexpr unsigned psum_tag_lsb = rank_id_lsb + rank_id;
  static constexpr unsigned locality_lsb = psum_tag_lsb + psum_tag;
  static constexpr unsigned weight_lsb = locality_lsb + locality;
  static constexpr unsigned daddr_lsb = weight_lsb + weight;
  static constexpr unsigned vsize_lsb = daddr_lsb + daddr;
  static constexpr unsigned ddr_cmd_lsb = vsize_lsb + vsize;
};
static_assert(InstLayout::total == 79, "NMP-Inst must be 79 bits wide");
static_assert(InstLayout::ddr_cmd_lsb + InstLayout::ddr_cmd == 79);

inline constexpr unsigned kMaxPsumTags = 1u << InstLayout::psum_tag;  // 16

struct NMPInst {
  std::uint8_t ddr_cmd = 0;
  std::uint8_t vsize = 1;  // bursts, 1..4
  std::uint64_t daddr = 0;
  float weight = 0.0f;
  bool locality = false;
  std::uint8_t psum_tag = 0;
  std::uint8_t rank_id = 0;

  friend bool operator==(const NMPInst& a, const NMPInst& b) {
    return a.ddr_cmd == b.ddr_cmd && a.vsize == b.vsize && a.daddr == b.daddr &&
           std::bit_cast<std::uint32_t>(a.weight) == std::bit_cast<std::uint32_t>(b.weight) &&
           a.locality == b.locality && a.psum_tag == b.psum_tag && a.rank_id == b.rank_id;
  }
};

/// 79-bit encoded instruction: bits [78:64] in hi, [63:0] in lo.
struct InstWord {
  std::uint16_t hi = 0;
  std::uint64_t lo = 0;
  friend bool operator==(const InstWord&, const InstWord&) = default;

  std::string to_hex() const {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(4) << hi << std::setw(16) << lo;
    return os.str();
  }
  static InstWord from_hex(const std::string& s) {
    if (s.size() != 20) throw ConfigError("NMP-Inst hex word must have 20 digits");
    InstWord w;
    w.hi = static_cast<std::uint16_t>(std::stoul(s.substr(0, 4), nullptr, 16));
    w.lo = std::stoull(s.substr(4), nullptr, 16);
    if (w.hi >> 15) throw ConfigError("NMP-Inst hex word exceeds 79 bits");
    return w;
  }
};

namespace detail {

inline void put_bits(InstWord& w, unsigned lsb, unsigned width, std::uint64_t v) {
  for (unsigned i = 0; i < width; ++i) {
    const std::uint64_t bit = (v >> i) & 1ULL;
    const unsigned pos = lsb + i;
    if (pos < 64) w.lo |= bit << pos;
    else w.hi = static_cast<std::uint16_t>(w.hi | (bit << (pos - 64)));
  }
}

inline std::uint64_t get_bits(const InstWord& w, unsigned lsb, unsigned width) {
  std::uint64_t v = 0;
  for (unsigned i = 0; i < width; ++i) {
    const unsigned pos = lsb + i;
    const std::uint64_t bit = pos < 64 ? (w.lo >> pos) & 1ULL : (w.hi >> (pos - 64)) & 1ULL;
    v |= bit << i;
  }
  return v;
}

}  // namespace detail

inline InstWord encode_inst(const NMPInst& in) {
  using L = InstLayout;
  if (in.ddr_cmd >> L::ddr_cmd) throw ConfigError("ddr_cmd overflows 3 bits");
  if (in.vsize < 1 || in.vsize > 4) throw ConfigError("vsize must be 1..4 bursts");
  if (in.daddr >> L::daddr) throw ConfigError("daddr overflows 34 bits");
  if (in.psum_tag >> L::psum_tag) throw ConfigError("psum_tag overflows 4 bits");
  if (in.rank_id >> L::rank_id) throw ConfigError("rank_id overflows 3 bits");
  InstWord w;
  detail::put_bits(w, L::ddr_cmd_lsb, L::ddr_cmd, in.ddr_cmd);
  detail::put_bits(w, L::vsize_lsb, L::vsize, in.vsize - 1u);
  detail::put_bits(w, L::daddr_lsb, L::daddr, in.daddr);
  detail::put_bits(w, L::weight_lsb, L::weight, std::bit_cast<std::uint32_t>(in.weight));
  detail::put_bits(w, L::locality_lsb, L::locality, in.locality ? 1 : 0);
  detail::put_bits(w, L::psum_tag_lsb, L::psum_tag, in.psum_tag);
  detail::put_bits(w, L::rank_id_lsb, L::rank_id, in.rank_id);
  return w;
}

inline NMPInst decode_inst(const InstWord& w) {
  using L = InstLayout;
  if (w.hi >> 15) throw ConfigError("NMP-Inst word exceeds 79 bits");
  NMPInst in;
  in.ddr_cmd = static_cast<std::uint8_t>(detail::get_bits(w, L::ddr_cmd_lsb, L::ddr_cmd));
  in.vsize = static_cast<std::uint8_t>(detail::get_bits(w, L::vsize_lsb, L::vsize) + 1);
  in.daddr = detail::get_bits(w, L::daddr_lsb, L::daddr);
  in.weight = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_bits(w, L::weight_lsb, L::weight)));
  in.locality = detail::get_bits(w, L::locality_lsb, L::locality) != 0;
  in.psum_tag = static_cast<std::uint8_t>(detail::get_bits(w, L::psum_tag_lsb, L::psum_tag));
  in.rank_id = static_cast<std::uint8_t>(detail::get_bits(w, L::rank_id_lsb, L::rank_id));
  return in;
}

struct NMPPacket {
  std::uint64_t packet_id = 0;
  std::uint32_t table_id = 0;
  std::uint32_t batch_id = 0;
  OpKind op_kind = OpKind::sum;
  std::uint32_t elements = 16;  // vector length of the owning table
  std::vector<NMPInst> insts;
  /// Embedding row behind each inst; simulation metadata for the functional
  /// datapath, never transmitted.
  std::vector<std::uint64_t> rows;
  std::array<std::uint32_t, kMaxPsumTags> counters{};
  unsigned num_tags = 0;

  /// Ranks that receive at least one instruction, as a bitmask.
  std::uint32_t rank_mask() const {
    std::uint32_t m = 0;
    for (const auto& i : insts) m |= 1u << i.rank_id;
    return m;
  }
};

/// One packet dump line per instruction: 20 hex digits (79 bits).
inline void dump_packet_hex(const NMPPacket& p, std::ostream& os) {
  for (const auto& i : p.insts) os << encode_inst(i).to_hex() << '\n';
}

inline std::vector<NMPInst> read_packet_hex(std::istream& is) {
  std::vector<NMPInst> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(decode_inst(InstWord::from_hex(line)));
  }
  return out;
}

/// Locality bits, one vector per pooling of a kernel (parallel to indices).
using LocalityBits = std::vector<std::vector<bool>>;

/// Compiles one kernel into packets of at most `poolings_per_packet` poolings
/// (one table per packet). Each lookup becomes one instruction tagged by its
/// pooling's slot in the packet. ddr_cmd stays 0 until issue order is final.
/// `locality` defaults to all-cacheable.
inline std::vector<NMPPacket> build_packets(const SLSKernel& kernel, const Trace& trace, const PageMap& pages,
                                            const MappingConfig& mapping, unsigned poolings_per_packet,
                                            const LocalityBits* locality = nullptr,
                                            std::uint64_t first_packet_id = 0) {
  if (poolings_per_packet == 0 || poolings_per_packet > kMaxPsumTags)
    throw ConfigError("poolings_per_packet must be in [1, 16]");
  if (locality && locality->size() != kernel.poolings.size())
    throw ConfigError("locality bits do not match kernel poolings");

  // Group poolings by table, in order of first appearance.
  std::vector<std::uint32_t> table_order;
  for (const auto& p : kernel.poolings)
    if (std::find(table_order.begin(), table_order.end(), p.table_id) == table_order.end())
      table_order.push_back(p.table_id);

  std::vector<NMPPacket> out;
  std::uint64_t next_id = first_packet_id;
  for (auto tid : table_order) {
    const TableSpec& spec = trace.table(tid);
    if (spec.vsize() < 1 || spec.vsize() > 4 || spec.vsize() * 64 != spec.vec_bytes)
      throw ConfigError("vec_bytes " + std::to_string(spec.vec_bytes) + " not encodable as vsize");
    NMPPacket* cur = nullptr;
    for (std::size_t pi = 0; pi < kernel.poolings.size(); ++pi) {
      const auto& pool = kernel.poolings[pi];
      if (pool.table_id != tid) continue;
      if (!cur || cur->num_tags == poolings_per_packet) {
        out.push_back({});
        cur = &out.back();
        cur->packet_id = next_id++;
        cur->table_id = tid;
        cur->batch_id = kernel.batch_id;
        cur->op_kind = kernel.op_kind;
        cur->elements = spec.elements();
      }
      const auto tag = static_cast<std::uint8_t>(cur->num_tags++);
      for (std::size_t i = 0; i < pool.indices.size(); ++i) {
        const auto row = pool.indices[i];
        if (row >= spec.rows) throw ConfigError("index out of range in table " + std::to_string(tid));
        const DramCoord c = phys_to_dram(pages.row_address(spec, row), mapping);
        NMPInst inst;
        inst.vsize = static_cast<std::uint8_t>(spec.vsize());
        inst.daddr = pack_daddr(c, mapping);
        inst.weight = is_weighted(kernel.op_kind) ? pool.weight_at(i) : 1.0f;
        inst.locality = locality ? (*locality)[pi].at(i) : true;
        inst.psum_tag = tag;
        inst.rank_id = static_cast<std::uint8_t>(c.rank_id(mapping));
        cur->insts.push_back(inst);
        cur->rows.push_back(row);
        ++cur->counters[tag];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DDR commands

enum class CmdKind : std::uint8_t { ACT, RD, PRE };

inline std::string_view to_string(CmdKind k) {
  switch (k) {
    case CmdKind::ACT: return "ACT";
    case CmdKind::RD: return "RD";
    case CmdKind::PRE: return "PRE";
  }
  return "?";
}

struct DDRCommand {
  CmdKind kind = CmdKind::RD;
  DramCoord coord;
  friend bool operator==(const DDRCommand&, const DDRCommand&) = default;
};

/// Open-row state per (rank, bank) under the open-page policy.
class RowStateTracker {
 public:
  explicit RowStateTracker(const MappingConfig& m)
      : banks_(m.banks_per_rank()), rows_(static_cast<std::size_t>(m.total_ranks()) * m.banks_per_rank()) {}

  std::optional<std::uint64_t> open_row(unsigned rank_id, unsigned bank_index) const {
    return rows_[rank_id * banks_ + bank_index];
  }

  /// Tags needed to read `row` in the given bank, and the state after it.
  std::uint8_t tags_for(unsigned rank_id, unsigned bank_index, std::uint64_t row) const {
    const auto& open = rows_[rank_id * banks_ + bank_index];
    if (!open) return ddr_cmd::ACT | ddr_cmd::RD;
    if (*open == row) return ddr_cmd::RD;
    return ddr_cmd::PRE | ddr_cmd::ACT | ddr_cmd::RD;
  }
  void open(unsigned rank_id, unsigned bank_index, std::uint64_t row) { rows_[rank_id * banks_ + bank_index] = row; }
  bool is_hit(unsigned rank_id, unsigned bank_index, std::uint64_t row) const {
    const auto& open = rows_[rank_id * banks_ + bank_index];
    return open && *open == row;
  }

 private:
  unsigned banks_;
  std::vector<std::optional<std::uint64_t>> rows_;
};

/// Sets ddr_cmd on each instruction from the row state left by its
/// predecessors. Instructions the RankCache will serve (`served_by_cache`)
/// get no DRAM commands and leave the row state alone.
template <class CachePredicate>
void assign_ddr_cmd_tags(std::span<NMPInst> insts, const MappingConfig& m, RowStateTracker& rows,
                         CachePredicate&& served_by_cache) {
  for (auto& inst : insts) {
    if (served_by_cache(inst)) {
      inst.ddr_cmd = 0;
      continue;
    }
    const DramCoord c = unpack_daddr(inst.daddr, inst.rank_id, m);
    inst.ddr_cmd = rows.tags_for(inst.rank_id, c.bank_index(m), c.row);
    rows.open(inst.rank_id, c.bank_index(m), c.row);
  }
}

inline void assign_ddr_cmd_tags(std::span<NMPInst> insts, const MappingConfig& m, RowStateTracker& rows) {
  assign_ddr_cmd_tags(insts, m, rows, [](const NMPInst&) { return false; });
}

/// PRE and ACT per the tags, then one RD per 64B burst at consecutive columns.
inline std::vector<DDRCommand> expand_to_ddr(const NMPInst& inst, const MappingConfig& m) {
  const DramCoord c = unpack_daddr(inst.daddr, inst.rank_id, m);
  std::vector<DDRCommand> out;
  if (inst.ddr_cmd & ddr_cmd::PRE) out.push_back({CmdKind::PRE, c});
  if (inst.ddr_cmd & ddr_cmd::ACT) out.push_back({CmdKind::ACT, c});
  if (inst.ddr_cmd & ddr_cmd::RD)
    for (unsigned b = 0; b < inst.vsize; ++b) {
      DramCoord cb = c;
      cb.column = c.column + b;
      out.push_back({CmdKind::RD, cb});
    }
  return out;
}

}  // namespace recnmp
