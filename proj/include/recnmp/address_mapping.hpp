#pragma once

// Logical table address -> physical frame (random or page-colored allocation)
// -> DRAM coordinate.

#include <array>
#include <bit>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "recnmp/common.hpp"
#include "recnmp/workload.hpp"

namespace recnmp {

enum class Field : std::uint8_t { offset, column, bank_group, bank, rank, dimm, row };

inline constexpr std::array<Field, 7> kAllFields = {Field::offset, Field::column, Field::bank_group,
                                                    Field::bank, Field::rank, Field::dimm, Field::row};

inline std::string_view to_string(Field f) {
  switch (f) {
    case Field::offset: return "offset";
    case Field::column: return "column";
    case Field::bank_group: return "bank_group";
    case Field::bank: return "bank";
    case Field::rank: return "rank";
    case Field::dimm: return "dimm";
    case Field::row: return "row";
  }
  return "?";
}

inline Field parse_field(std::string_view s) {
  for (auto f : kAllFields)
    if (to_string(f) == s) return f;
  throw ConfigError("unknown address field '" + std::string(s) + "'");
}

/// Inclusive physical-address bit range [lo, hi].
struct BitRange {
  unsigned hi = 0;
  unsigned lo = 0;
  unsigned width() const { return hi - lo + 1; }
  friend bool operator==(const BitRange&, const BitRange&) = default;
};

/// Parses "bits[hi:lo]" or a comma list of them, LSB-first concatenation.
inline std::vector<BitRange> parse_bit_ranges(std::string_view s) {
  std::vector<BitRange> out;
  while (!s.empty()) {
    if (s.substr(0, 5) != "bits[") throw ConfigError("bit range must look like bits[hi:lo]");
    auto close = s.find(']');
    auto colon = s.find(':');
    if (close == std::string_view::npos || colon == std::string_view::npos || colon > close)
      throw ConfigError("bit range must look like bits[hi:lo]");
    BitRange r;
    r.hi = static_cast<unsigned>(std::stoul(std::string(s.substr(5, colon - 5))));
    r.lo = static_cast<unsigned>(std::stoul(std::string(s.substr(colon + 1, close - colon - 1))));
    if (r.hi < r.lo) throw ConfigError("bit range hi < lo");
    out.push_back(r);
    s.remove_prefix(close + 1);
    if (!s.empty() && s.front() == ',') s.remove_prefix(1);
  }
  return out;
}

inline std::string format_bit_ranges(const std::vector<BitRange>& v) {
  std::string out;
  for (const auto& r : v) {
    if (!out.empty()) out += ',';
    out += "bits[" + std::to_string(r.hi) + ":" + std::to_string(r.lo) + "]";
  }
  return out;
}

struct MappingConfig {
  unsigned channels = 1;
  unsigned dimms_per_channel = 4;
  unsigned ranks_per_dimm = 2;
  unsigned bank_groups = 4;
  unsigned banks_per_group = 4;
  std::uint64_t rows_per_bank = 65536;  // 8Gb x8 devices: 8GB per rank
  unsigned columns_per_row = 128;       // 64B blocks per 8KB row
  unsigned line_bytes = 64;
  unsigned page_bytes = 4096;
  /// XOR the bank-group/bank coordinates with the low row bits.
  bool bank_xor = false;
  /// Field -> LSB-first list of physical bit ranges. Empty means default.
  std::map<Field, std::vector<BitRange>> slices;

  unsigned total_ranks() const { return dimms_per_channel * ranks_per_dimm; }
  unsigned banks_per_rank() const { return bank_groups * banks_per_group; }

  std::uint64_t capacity() const {
    return static_cast<std::uint64_t>(total_ranks()) * banks_per_rank() * rows_per_bank *
           columns_per_row * line_bytes;
  }

  unsigned width(Field f) const {
    switch (f) {
      case Field::offset: return log2_exact(line_bytes);
      case Field::column: return log2_exact(columns_per_row);
      case Field::bank_group: return log2_exact(bank_groups);
      case Field::bank: return log2_exact(banks_per_group);
      case Field::rank: return log2_exact(ranks_per_dimm);
      case Field::dimm: return log2_exact(dimms_per_channel);
      case Field::row: return log2_exact(rows_per_bank);
    }
    return 0;
  }

  /// Default layout, LSB to MSB: offset | column | bank_group | bank | rank |
  /// dimm | row. A 64B block's column-low bits are the burst itself, so
  /// consecutive blocks of a page stay in one row while banks interleave
  /// above the 8KB row granule.
  std::map<Field, std::vector<BitRange>> default_slices() const {
    std::map<Field, std::vector<BitRange>> out;
    unsigned bit = 0;
    for (auto f : {Field::offset, Field::column, Field::bank_group, Field::bank, Field::rank,
                   Field::dimm, Field::row}) {
      const unsigned w = width(f);
      if (w > 0) out[f] = {BitRange{bit + w - 1, bit}};
      else out[f] = {};
      bit += w;
    }
    return out;
  }

  const std::vector<BitRange>& ranges(Field f) const {
    static const std::vector<BitRange> kEmpty;
    auto it = slices.find(f);
    return it == slices.end() ? kEmpty : it->second;
  }

  /// Fills `slices` with the default layout when empty, then checks that the
  /// slices tile [0, log2(capacity)) exactly.
  void finalize() {
    if (slices.empty()) slices = default_slices();
    for (auto f : kAllFields) slices.try_emplace(f);
    validate();
  }

  void validate() const {
    auto pow2 = [](std::uint64_t v, const char* what) {
      if (!is_pow2(v)) throw ConfigError(std::string("mapping.") + what + " must be a power of two");
    };
    pow2(dimms_per_channel, "dimms_per_channel");
    pow2(ranks_per_dimm, "ranks_per_dimm");
    pow2(bank_groups, "bank_groups");
    pow2(banks_per_group, "banks_per_group");
    pow2(rows_per_bank, "rows_per_bank");
    pow2(columns_per_row, "columns_per_row");
    pow2(line_bytes, "line_bytes");
    pow2(page_bytes, "page_bytes");
    if (channels != 1) throw ConfigError("mapping.channels: simulate one channel per run");
    if (total_ranks() > 8) throw ConfigError("mapping: at most 8 ranks per channel (3-bit rank id)");
    if (page_bytes < line_bytes) throw ConfigError("mapping.page_bytes < line_bytes");
    const unsigned total_bits = log2_exact(capacity());
    std::vector<int> owner(total_bits, -1);
    for (auto f : kAllFields) {
      unsigned w = 0;
      for (const auto& r : ranges(f)) {
        if (r.hi >= total_bits)
          throw ConfigError("mapping.bit_slices." + std::string(to_string(f)) + ": bit " +
                            std::to_string(r.hi) + " beyond capacity");
        for (unsigned b = r.lo; b <= r.hi; ++b) {
          if (owner[b] != -1)
            throw ConfigError("mapping.bit_slices: bit " + std::to_string(b) + " assigned twice");
          owner[b] = static_cast<int>(f);
        }
        w += r.width();
      }
      if (w != width(f))
        throw ConfigError("mapping.bit_slices." + std::string(to_string(f)) + ": width " +
                          std::to_string(w) + " != geometry width " + std::to_string(width(f)));
    }
    for (unsigned b = 0; b < total_bits; ++b)
      if (owner[b] == -1) throw ConfigError("mapping.bit_slices: bit " + std::to_string(b) + " unassigned");
  }

  /// "DxR" memory configuration (DIMMs x ranks per DIMM), e.g. "4x2".
  static MappingConfig from_label(std::string_view label) {
    auto x = label.find('x');
    if (x == std::string_view::npos) throw ConfigError("memory config must look like <dimms>x<ranks>");
    MappingConfig m;
    try {
      m.dimms_per_channel = static_cast<unsigned>(std::stoul(std::string(label.substr(0, x))));
      m.ranks_per_dimm = static_cast<unsigned>(std::stoul(std::string(label.substr(x + 1))));
    } catch (const std::exception&) {
      throw ConfigError("memory config must look like <dimms>x<ranks>");
    }
    m.finalize();
    return m;
  }
};

struct DramCoord {
  unsigned dimm = 0;
  unsigned rank = 0;  // within the DIMM
  unsigned bank_group = 0;
  unsigned bank = 0;
  std::uint64_t row = 0;
  unsigned column = 0;  // 64B-block granularity

  unsigned rank_id(const MappingConfig& m) const { return dimm * m.ranks_per_dimm + rank; }
  unsigned bank_index(const MappingConfig& m) const { return bank_group * m.banks_per_group + bank; }

  friend bool operator==(const DramCoord&, const DramCoord&) = default;
};

/// Rank-local block address: row | bank | bank_group | column, mixed radix.
inline std::uint64_t pack_daddr(const DramCoord& c, const MappingConfig& m) {
  return ((c.row * m.banks_per_group + c.bank) * m.bank_groups + c.bank_group) * m.columns_per_row + c.column;
}

inline DramCoord unpack_daddr(std::uint64_t daddr, unsigned rank_id, const MappingConfig& m) {
  DramCoord c;
  c.column = static_cast<unsigned>(daddr % m.columns_per_row);
  daddr /= m.columns_per_row;
  c.bank_group = static_cast<unsigned>(daddr % m.bank_groups);
  daddr /= m.bank_groups;
  c.bank = static_cast<unsigned>(daddr % m.banks_per_group);
  c.row = daddr / m.banks_per_group;
  c.dimm = rank_id / m.ranks_per_dimm;
  c.rank = rank_id % m.ranks_per_dimm;
  return c;
}

namespace detail {

inline std::uint64_t gather(std::uint64_t addr, const std::vector<BitRange>& ranges) {
  std::uint64_t v = 0;
  unsigned shift = 0;
  for (const auto& r : ranges) {
    v |= ((addr >> r.lo) & ((1ULL << r.width()) - 1)) << shift;
    shift += r.width();
  }
  return v;
}

inline std::uint64_t scatter(std::uint64_t v, const std::vector<BitRange>& ranges) {
  std::uint64_t addr = 0;
  for (const auto& r : ranges) {
    addr |= (v & ((1ULL << r.width()) - 1)) << r.lo;
    v >>= r.width();
  }
  return addr;
}

}  // namespace detail

inline DramCoord phys_to_dram(std::uint64_t phys, const MappingConfig& m) {
  if (phys >= m.capacity()) throw std::out_of_range("physical address beyond channel capacity");
  DramCoord c;
  c.column = static_cast<unsigned>(detail::gather(phys, m.ranges(Field::column)));
  c.bank_group = static_cast<unsigned>(detail::gather(phys, m.ranges(Field::bank_group)));
  c.bank = static_cast<unsigned>(detail::gather(phys, m.ranges(Field::bank)));
  c.rank = static_cast<unsigned>(detail::gather(phys, m.ranges(Field::rank)));
  c.dimm = static_cast<unsigned>(detail::gather(phys, m.ranges(Field::dimm)));
  c.row = detail::gather(phys, m.ranges(Field::row));
  if (m.bank_xor) {
    c.bank_group ^= static_cast<unsigned>(c.row & (m.bank_groups - 1));
    c.bank ^= static_cast<unsigned>((c.row >> m.width(Field::bank_group)) & (m.banks_per_group - 1));
  }
  return c;
}

/// Inverse of phys_to_dram for the block base address (offset 0).
inline std::uint64_t dram_to_phys(const DramCoord& c, const MappingConfig& m) {
  unsigned bg = c.bank_group, bank = c.bank;
  if (m.bank_xor) {
    bg ^= static_cast<unsigned>(c.row & (m.bank_groups - 1));
    bank ^= static_cast<unsigned>((c.row >> m.width(Field::bank_group)) & (m.banks_per_group - 1));
  }
  return detail::scatter(c.column, m.ranges(Field::column)) |
         detail::scatter(bg, m.ranges(Field::bank_group)) | detail::scatter(bank, m.ranges(Field::bank)) |
         detail::scatter(c.rank, m.ranges(Field::rank)) | detail::scatter(c.dimm, m.ranges(Field::dimm)) |
         detail::scatter(c.row, m.ranges(Field::row));
}

// ---------------------------------------------------------------------------
// Page allocation

class PageMap {
 public:
  PageMap() = default;
  PageMap(unsigned page_bytes, std::uint64_t seed) : page_bytes_(page_bytes), seed_(seed) {}

  void add_table(std::uint32_t table_id, std::vector<std::uint64_t> frames) {
    frames_[table_id] = std::move(frames);
  }
  const std::vector<std::uint64_t>& frames(std::uint32_t table_id) const {
    auto it = frames_.find(table_id);
    if (it == frames_.end()) throw ConfigError("unmapped table " + std::to_string(table_id));
    return it->second;
  }
  bool has_table(std::uint32_t table_id) const { return frames_.count(table_id) != 0; }

  /// Physical address of a byte offset within a table's logical space.
  std::uint64_t translate(std::uint32_t table_id, std::uint64_t logical) const {
    const auto& f = frames(table_id);
    const std::uint64_t page = logical / page_bytes_;
    if (page >= f.size()) throw ConfigError("unmapped page in table " + std::to_string(table_id));
    return f[page] * page_bytes_ + logical % page_bytes_;
  }

  std::uint64_t row_address(const TableSpec& t, std::uint64_t row) const {
    return translate(t.table_id, row * t.row_stride());
  }

  unsigned page_bytes() const { return page_bytes_; }
  std::uint64_t seed() const { return seed_; }
  const std::map<std::uint32_t, std::vector<std::uint64_t>>& all() const { return frames_; }

 private:
  unsigned page_bytes_ = 4096;
  std::uint64_t seed_ = 0;
  std::map<std::uint32_t, std::vector<std::uint64_t>> frames_;
};

namespace detail {

/// Sparse Fisher-Yates: draws distinct values from [0, n) uniformly.
class DistinctSampler {
 public:
  explicit DistinctSampler(std::uint64_t n) : n_(n) {}
  std::uint64_t remaining() const { return n_ - drawn_; }
  std::uint64_t draw(Rng& rng) {
    if (drawn_ >= n_) throw ConfigError("out of free frames");
    const std::uint64_t j = drawn_ + rng.below(n_ - drawn_);
    const std::uint64_t vj = value(j);
    swapped_[j] = value(drawn_);
    ++drawn_;
    return vj;
  }

 private:
  std::uint64_t value(std::uint64_t i) const {
    auto it = swapped_.find(i);
    return it == swapped_.end() ? i : it->second;
  }
  std::uint64_t n_;
  std::uint64_t drawn_ = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> swapped_;
};

inline std::uint64_t pages_for(const TableSpec& t, unsigned page_bytes) {
  return (t.footprint_bytes() + page_bytes - 1) / page_bytes;
}

}  // namespace detail

/// Random OS allocation: every logical page gets a frame drawn uniformly
/// without replacement from the whole channel.
inline PageMap allocate_pages(const std::vector<TableSpec>& tables, const MappingConfig& m,
                              std::uint64_t seed) {
  const std::uint64_t total_frames = m.capacity() / m.page_bytes;
  std::uint64_t needed = 0;
  for (const auto& t : tables) needed += detail::pages_for(t, m.page_bytes);
  if (needed > total_frames)
    throw ConfigError("out of memory: tables need " + std::to_string(needed) + " pages, channel has " +
                      std::to_string(total_frames));
  PageMap pm(m.page_bytes, seed);
  Rng rng(seed);
  detail::DistinctSampler sampler(total_frames);
  for (const auto& t : tables) {
    std::vector<std::uint64_t> frames(detail::pages_for(t, m.page_bytes));
    for (auto& f : frames) f = sampler.draw(rng);
    pm.add_table(t.table_id, std::move(frames));
  }
  return pm;
}

using ColorFn = std::function<unsigned(std::uint32_t table_id)>;

/// Page coloring: all frames of a table map to rank color_fn(table_id).
/// Default color is table_id mod total_ranks.
inline PageMap allocate_pages_colored(const std::vector<TableSpec>& tables, const MappingConfig& m,
                                      ColorFn color_fn = {}, std::uint64_t seed = 0) {
  const unsigned ranks = m.total_ranks();
  if (!color_fn) color_fn = [ranks](std::uint32_t id) { return id % ranks; };
  const unsigned page_shift = log2_exact(m.page_bytes);
  const unsigned frame_bits = log2_exact(m.capacity()) - page_shift;

  // Frame-number bit positions that carry rank/dimm; every other position is free.
  std::vector<unsigned> free_pos;
  std::vector<BitRange> rank_in_frame, dimm_in_frame;
  for (auto [field, out] : {std::pair{Field::rank, &rank_in_frame}, std::pair{Field::dimm, &dimm_in_frame}})
    for (const auto& r : m.ranges(field)) {
      if (r.lo < page_shift)
        throw ConfigError("page coloring impossible: rank/dimm bits lie inside a page");
      out->push_back({r.hi - page_shift, r.lo - page_shift});
    }
  for (unsigned b = 0; b < frame_bits; ++b) {
    bool fixed = false;
    for (const auto* v : {&rank_in_frame, &dimm_in_frame})
      for (const auto& r : *v)
        if (b >= r.lo && b <= r.hi) fixed = true;
    if (!fixed) free_pos.push_back(b);
  }
  const std::uint64_t class_size = 1ULL << free_pos.size();

  std::map<unsigned, std::uint64_t> demand;
  for (const auto& t : tables) {
    const unsigned color = color_fn(t.table_id);
    if (color >= ranks) throw ConfigError("color " + std::to_string(color) + " exceeds rank count");
    demand[color] += detail::pages_for(t, m.page_bytes);
  }
  for (auto [color, pages] : demand)
    if (pages > class_size)
      throw ConfigError("rank overflow: rank " + std::to_string(color) + " needs " + std::to_string(pages) +
                        " pages, has " + std::to_string(class_size));

  PageMap pm(m.page_bytes, seed);
  Rng rng(seed);
  std::map<unsigned, detail::DistinctSampler> samplers;
  for (const auto& t : tables) {
    const unsigned color = color_fn(t.table_id);
    auto it = samplers.try_emplace(color, class_size).first;
    const std::uint64_t fixed = detail::scatter(color % m.ranks_per_dimm, rank_in_frame) |
                                detail::scatter(color / m.ranks_per_dimm, dimm_in_frame);
    std::vector<std::uint64_t> frames(detail::pages_for(t, m.page_bytes));
    for (auto& f : frames) {
      const std::uint64_t idx = it->second.draw(rng);
      std::uint64_t frame = fixed;
      for (std::size_t k = 0; k < free_pos.size(); ++k) frame |= ((idx >> k) & 1ULL) << free_pos[k];
      f = frame;
    }
    pm.add_table(t.table_id, std::move(frames));
  }
  return pm;
}

}  // namespace recnmp
