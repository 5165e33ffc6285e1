#pragma once

// Memory-system energy from event counts. All categories in nJ.

#include <cstdint>
#include <optional>
#include <ostream>

#include "recnmp/common.hpp"

namespace recnmp {

struct EnergyParams {
  double act_nj = 2.1;
  double rdwr_pj_per_bit = 14.0;
  double io_pj_per_bit = 22.0;
  double cache_pj_per_access = 50.0;
  double add_pj = 7.89;
  double mult_pj = 25.2;

  void validate() const {
    for (double v : {act_nj, rdwr_pj_per_bit, io_pj_per_bit, cache_pj_per_access, add_pj, mult_pj})
      if (!(v >= 0.0)) throw ConfigError("energy parameters must be non-negative");
  }
  friend bool operator==(const EnergyParams&, const EnergyParams&) = default;
};

struct EnergyEvents {
  std::uint64_t activates = 0;
  std::uint64_t dram_bits_read = 0;
  std::uint64_t io_bits = 0;  // bits crossing the DIMM interface, either direction
  std::uint64_t cache_accesses = 0;
  std::uint64_t adds = 0;
  std::uint64_t mults = 0;
  friend bool operator==(const EnergyEvents&, const EnergyEvents&) = default;
};

struct EnergyReport {
  double activate = 0, dram_rd = 0, io = 0, cache = 0, arithmetic = 0;

  double total() const { return activate + dram_rd + io + cache + arithmetic; }

  /// Percentage saved relative to `baseline` (positive = less energy).
  double savings_vs(const EnergyReport& baseline) const {
    const double b = baseline.total();
    if (b <= 0.0) throw ConfigError("energy savings undefined for an empty baseline");
    return 100.0 * (1.0 - total() / b);
  }
  friend bool operator==(const EnergyReport&, const EnergyReport&) = default;
};

inline EnergyReport account(const EnergyEvents& ev, const EnergyParams& p = {}) {
  p.validate();
  EnergyReport r;
  r.activate = static_cast<double>(ev.activates) * p.act_nj;
  r.dram_rd = static_cast<double>(ev.dram_bits_read) * p.rdwr_pj_per_bit * 1e-3;
  r.io = static_cast<double>(ev.io_bits) * p.io_pj_per_bit * 1e-3;
  r.cache = static_cast<double>(ev.cache_accesses) * p.cache_pj_per_access * 1e-3;
  r.arithmetic = (static_cast<double>(ev.adds) * p.add_pj + static_cast<double>(ev.mults) * p.mult_pj) * 1e-3;
  return r;
}

inline void write_energy_csv(const EnergyReport& r, std::ostream& os, const std::string& label = "run") {
  os << "label,category,nj\n";
  os << label << ",activate," << r.activate << '\n';
  os << label << ",dram_rd," << r.dram_rd << '\n';
  os << label << ",io," << r.io << '\n';
  os << label << ",cache," << r.cache << '\n';
  os << label << ",arithmetic," << r.arithmetic << '\n';
  os << label << ",total," << r.total() << '\n';
}

}  // namespace recnmp
