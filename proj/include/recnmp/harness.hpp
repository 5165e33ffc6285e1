#pragma once

// Experiment orchestration: config, the four system variants, sweeps,
// load-imbalance statistics, the end-to-end estimator, and reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "recnmp/address_mapping.hpp"
#include "recnmp/cache.hpp"
#include "recnmp/common.hpp"
#include "recnmp/dram_engine.hpp"
#include "recnmp/energy.hpp"
#include "recnmp/mem_controller.hpp"
#include "recnmp/nmp_isa.hpp"
#include "recnmp/nmp_pu.hpp"
#include "recnmp/trace_io.hpp"
#include "recnmp/workload.hpp"

namespace recnmp {

using json = nlohmann::json;

inline constexpr std::string_view kVersion = "recnmp-sim 1.0.0";

enum class Variant { baseline, nmp_base, nmp_cache, nmp_opt };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::nmp_base: return "nmp-base";
    case Variant::nmp_cache: return "nmp-cache";
    case Variant::nmp_opt: return "nmp-opt";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "nmp-base") return Variant::nmp_base;
  if (s == "nmp-cache") return Variant::nmp_cache;
  if (s == "nmp-opt") return Variant::nmp_opt;
  throw ConfigError("variant: unknown value '" + std::string(s) + "'");
}

enum class PagePolicy { random, colored };

struct TraceParams {
  std::string source = "locality";  // random | locality | file
  std::string path;
  std::uint32_t tables = 8;
  std::uint64_t rows = 1'000'000;
  std::uint32_t vec_bytes = 64;
  DType dtype = DType::fp32;
  std::uint32_t batches = 64;
  std::uint32_t poolings_per_batch = 8;
  std::uint32_t pooling_factor = 80;
  double zipf_exponent = kCalibratedZipfExponent;
  bool weighted = false;
  std::uint32_t replication = 1;
};

struct ProfilerParams {
  bool enabled = false;
  std::optional<std::uint32_t> t;  // nullopt = sweep per kernel
  std::vector<std::uint32_t> candidates = {1, 2, 3, 4, 6, 8, 12, 16};
};

/// Resolved experiment configuration.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string memory = "4x2";
  MappingConfig mapping = MappingConfig::from_label("4x2");
  PagePolicy page_policy = PagePolicy::random;
  TraceParams trace;
  std::uint32_t poolings_per_packet = 8;
  Variant variant = Variant::nmp_opt;
  SchedulerPolicy scheduler = SchedulerPolicy::table_aware;
  ProfilerParams profiler{true, std::nullopt, {1, 2, 3, 4, 6, 8, 12, 16}};
  bool cache_enabled = true;
  CacheConfig cache;
  bool latency_growth = false;
  std::vector<std::pair<std::uint64_t, Cycle>> latency_table;
  TimingParams timing;
  RefreshParams refresh{true};
  EnergyParams energy;
  unsigned host_threads = 8;
  std::size_t packet_queue_depth = 64;
  std::size_t host_queue_depth = 32;
  unsigned fifo_depth = 16;
  unsigned ca_insts_per_cycle = 2;
  unsigned dispatch_window = 64;
  CaArbiter ca_arbiter = CaArbiter::most_remaining;
  RankRelease rank_release = RankRelease::on_sent;
  bool frfcfs = true;
  bool functional_check = false;
  bool log_commands = false;

  json raw;  // the document this config was parsed from, with defaults filled in

  NmpConfig nmp_config() const {
    NmpConfig n;
    n.cache_enabled = cache_enabled;
    n.cache = cache;
    n.cache_latency_table = latency_growth && latency_table.empty() ? default_latency_growth() : latency_table;
    n.fifo_depth = fifo_depth;
    n.ca_insts_per_cycle = ca_insts_per_cycle;
    n.dispatch_window = dispatch_window;
    n.ca_arbiter = ca_arbiter;
    n.rank_release = rank_release;
    n.refresh = refresh;
    n.log_commands = log_commands;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline void check_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError((path.empty() ? "" : path + ".") + k + ": unknown key");
}

template <class T>
T get(const json& j, const std::string& key, const std::string& path, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError((path.empty() ? "" : path + ".") + key + ": wrong type");
  }
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace detail

/// Parses and validates a config document. Errors name the offending field.
/// The `RECNMP_SEED` environment variable, when set, overrides `seed`.
inline ExperimentConfig parse_config(json j, bool env_override = true) {
  using detail::get;
  using detail::join;
  if (j.is_null()) j = json::object();
  detail::check_keys(j, "", {"seed", "memory", "mapping", "page_policy", "trace", "poolings_per_packet", "variant",
                             "scheduler", "profiler", "cache", "timing", "refresh", "energy", "host_threads",
                             "packet_queue_depth", "host_queue_depth", "fifo_depth", "ca_insts_per_cycle",
                             "dispatch_window", "ca_arbiter", "rank_release", "frfcfs", "functional_check"});
  ExperimentConfig c;
  c.seed = get<std::uint64_t>(j, "seed", "", 1);
  if (env_override)
    if (const char* s = std::getenv("RECNMP_SEED")) {
      try {
        std::size_t pos = 0;
        c.seed = std::stoull(s, &pos);
        if (pos != std::string(s).size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("RECNMP_SEED: not an unsigned integer");
      }
      j["seed"] = c.seed;
    }

  c.memory = get<std::string>(j, "memory", "", "4x2");
  try {
    c.mapping = MappingConfig::from_label(c.memory);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("memory: ") + e.what());
  }
  if (j.contains("mapping")) {
    const json& mj = j["mapping"];
    detail::check_keys(mj, "mapping", {"rows_per_bank", "columns_per_row", "bank_groups", "banks_per_group",
                                       "bank_xor", "slices"});
    c.mapping.rows_per_bank = get<std::uint64_t>(mj, "rows_per_bank", "mapping", c.mapping.rows_per_bank);
    c.mapping.columns_per_row = get<unsigned>(mj, "columns_per_row", "mapping", c.mapping.columns_per_row);
    c.mapping.bank_groups = get<unsigned>(mj, "bank_groups", "mapping", c.mapping.bank_groups);
    c.mapping.banks_per_group = get<unsigned>(mj, "banks_per_group", "mapping", c.mapping.banks_per_group);
    c.mapping.bank_xor = get<bool>(mj, "bank_xor", "mapping", false);
    if (mj.contains("slices")) {
      const json& sj = mj["slices"];
      if (!sj.is_object()) throw ConfigError("mapping.slices: expected an object");
      for (const auto& [k, v] : sj.items()) {
        try {
          c.mapping.slices[parse_field(k)] = parse_bit_ranges(v.get<std::string>());
        } catch (const std::exception& e) {
          throw ConfigError("mapping.slices." + k + ": " + e.what());
        }
      }
    }
  }
  try {
    c.mapping.finalize();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("mapping: ") + e.what());
  }

  const auto pp = get<std::string>(j, "page_policy", "", "random");
  if (pp == "random") c.page_policy = PagePolicy::random;
  else if (pp == "colored") c.page_policy = PagePolicy::colored;
  else throw ConfigError("page_policy: expected random|colored");

  const json tj = j.value("trace", json::object());
  detail::check_keys(tj, "trace", {"source", "path", "tables", "rows", "vec_bytes", "dtype", "batches",
                                   "poolings_per_batch", "pooling_factor", "zipf_exponent", "weighted", "replication"});
  auto& t = c.trace;
  t.source = get<std::string>(tj, "source", "trace", t.source);
  if (t.source != "random" && t.source != "locality" && t.source != "file")
    throw ConfigError("trace.source: expected random|locality|file");
  t.path = get<std::string>(tj, "path", "trace", "");
  if (t.source == "file" && t.path.empty()) throw ConfigError("trace.path: required when source is file");
  t.tables = get<std::uint32_t>(tj, "tables", "trace", t.tables);
  t.rows = get<std::uint64_t>(tj, "rows", "trace", t.rows);
  t.vec_bytes = get<std::uint32_t>(tj, "vec_bytes", "trace", t.vec_bytes);
  try {
    t.dtype = parse_dtype(get<std::string>(tj, "dtype", "trace", "fp32"));
  } catch (const ConfigError&) {
    throw ConfigError("trace.dtype: expected fp32|int8q");
  }
  t.batches = get<std::uint32_t>(tj, "batches", "trace", t.batches);
  t.poolings_per_batch = get<std::uint32_t>(tj, "poolings_per_batch", "trace", t.poolings_per_batch);
  t.pooling_factor = get<std::uint32_t>(tj, "pooling_factor", "trace", t.pooling_factor);
  t.zipf_exponent = get<double>(tj, "zipf_exponent", "trace", t.zipf_exponent);
  t.weighted = get<bool>(tj, "weighted", "trace", false);
  t.replication = get<std::uint32_t>(tj, "replication", "trace", 1);
  if (t.tables == 0) throw ConfigError("trace.tables: must be >= 1");
  if (t.rows == 0) throw ConfigError("trace.rows: must be >= 1");
  if (t.batches == 0) throw ConfigError("trace.batches: must be >= 1");
  if (t.poolings_per_batch == 0) throw ConfigError("trace.poolings_per_batch: must be >= 1");
  if (t.pooling_factor == 0) throw ConfigError("trace.pooling_factor: must be >= 1");
  if (!(t.zipf_exponent >= 0.0)) throw ConfigError("trace.zipf_exponent: must be >= 0");
  if (t.replication == 0) throw ConfigError("trace.replication: must be >= 1");
  try {
    TableSpec{0, t.rows, t.vec_bytes, t.dtype}.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("trace: ") + e.what());
  }

  c.poolings_per_packet = get<std::uint32_t>(j, "poolings_per_packet", "", 8);
  if (c.poolings_per_packet == 0 || c.poolings_per_packet > kMaxPsumTags)
    throw ConfigError("poolings_per_packet: must be in [1, 16]");

  c.variant = parse_variant(get<std::string>(j, "variant", "", "nmp-opt"));
  const bool is_opt = c.variant == Variant::nmp_opt;
  const bool has_cache = c.variant == Variant::nmp_cache || is_opt;

  // Scheduler and profiler follow the variant unless set explicitly.
  c.scheduler = is_opt ? SchedulerPolicy::table_aware : SchedulerPolicy::fcfs;
  if (j.contains("scheduler")) {
    try {
      c.scheduler = parse_scheduler(get<std::string>(j, "scheduler", "", ""));
    } catch (const ConfigError&) {
      throw ConfigError("scheduler: expected fcfs|table_aware");
    }
    if (is_opt && c.scheduler != SchedulerPolicy::table_aware)
      throw ConfigError("scheduler: nmp-opt requires table_aware");
  }
  const json pj = j.value("profiler", json::object());
  detail::check_keys(pj, "profiler", {"enabled", "t", "candidates"});
  c.profiler.enabled = get<bool>(pj, "enabled", "profiler", is_opt);
  if (is_opt && !c.profiler.enabled) throw ConfigError("profiler.enabled: nmp-opt requires the profiler");
  if (c.profiler.enabled && !has_cache) throw ConfigError("profiler.enabled: locality hints need a RankCache variant");
  if (pj.contains("t")) {
    const json& tv = pj["t"];
    if (tv.is_string() && tv.get<std::string>() == "auto") c.profiler.t.reset();
    else if (tv.is_number_unsigned() && tv.get<std::uint64_t>() >= 1) c.profiler.t = tv.get<std::uint32_t>();
    else throw ConfigError("profiler.t: expected \"auto\" or an integer >= 1");
  }
  c.profiler.candidates = get<std::vector<std::uint32_t>>(pj, "candidates", "profiler", c.profiler.candidates);
  if (c.profiler.candidates.empty()) throw ConfigError("profiler.candidates: must be non-empty");
  for (auto v : c.profiler.candidates)
    if (v < 1) throw ConfigError("profiler.candidates: values must be >= 1");

  const json cj = j.value("cache", json::object());
  detail::check_keys(cj, "cache", {"enabled", "capacity_bytes", "line_bytes", "ways", "latency_growth", "latency_table"});
  c.cache_enabled = get<bool>(cj, "enabled", "cache", has_cache);
  if (has_cache && !c.cache_enabled) throw ConfigError("cache.enabled: " + std::string(to_string(c.variant)) + " requires the RankCache");
  if (!has_cache && c.cache_enabled) throw ConfigError("cache.enabled: " + std::string(to_string(c.variant)) + " has no RankCache");
  c.cache.capacity_bytes = get<std::uint64_t>(cj, "capacity_bytes", "cache", c.cache.capacity_bytes);
  c.cache.line_bytes = get<unsigned>(cj, "line_bytes", "cache", c.cache.line_bytes);
  c.cache.ways = get<unsigned>(cj, "ways", "cache", c.cache.ways);
  if (c.cache.line_bytes != 64) throw ConfigError("cache.line_bytes: the RankCache holds 64B lines");
  try {
    c.cache.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("cache: ") + e.what());
  }
  c.latency_growth = get<bool>(cj, "latency_growth", "cache", false);
  c.latency_table = get<std::vector<std::pair<std::uint64_t, Cycle>>>(cj, "latency_table", "cache", {});

  const json tmj = j.value("timing", json::object());
  detail::check_keys(tmj, "timing", {"tRC", "tRCD", "tCL", "tRP", "tBL", "tCCD_S", "tCCD_L", "tRRD_S", "tRRD_L", "tFAW", "tRTP"});
  auto& tm = c.timing;
  for (auto [name, ref] : std::initializer_list<std::pair<const char*, Cycle*>>{
           {"tRC", &tm.tRC}, {"tRCD", &tm.tRCD}, {"tCL", &tm.tCL}, {"tRP", &tm.tRP}, {"tBL", &tm.tBL},
           {"tCCD_S", &tm.tCCD_S}, {"tCCD_L", &tm.tCCD_L}, {"tRRD_S", &tm.tRRD_S}, {"tRRD_L", &tm.tRRD_L},
           {"tFAW", &tm.tFAW}, {"tRTP", &tm.tRTP}})
    *ref = get<Cycle>(tmj, name, "timing", *ref);
  try {
    tm.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("timing: ") + e.what());
  }

  const json rj = j.value("refresh", json::object());
  detail::check_keys(rj, "refresh", {"enabled", "staggered", "tREFI", "tRFC"});
  c.refresh.enabled = get<bool>(rj, "enabled", "refresh", true);
  c.refresh.staggered = get<bool>(rj, "staggered", "refresh", false);
  c.refresh.tREFI = get<Cycle>(rj, "tREFI", "refresh", c.refresh.tREFI);
  c.refresh.tRFC = get<Cycle>(rj, "tRFC", "refresh", c.refresh.tRFC);
  try {
    c.refresh.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("refresh: ") + e.what());
  }

  const json ej = j.value("energy", json::object());
  detail::check_keys(ej, "energy", {"act_nj", "rdwr_pj_per_bit", "io_pj_per_bit", "cache_pj_per_access", "add_pj", "mult_pj"});
  auto& en = c.energy;
  en.act_nj = get<double>(ej, "act_nj", "energy", en.act_nj);
  en.rdwr_pj_per_bit = get<double>(ej, "rdwr_pj_per_bit", "energy", en.rdwr_pj_per_bit);
  en.io_pj_per_bit = get<double>(ej, "io_pj_per_bit", "energy", en.io_pj_per_bit);
  en.cache_pj_per_access = get<double>(ej, "cache_pj_per_access", "energy", en.cache_pj_per_access);
  en.add_pj = get<double>(ej, "add_pj", "energy", en.add_pj);
  en.mult_pj = get<double>(ej, "mult_pj", "energy", en.mult_pj);
  try {
    en.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("energy: ") + e.what());
  }

  c.host_threads = get<unsigned>(j, "host_threads", "", 8);
  c.packet_queue_depth = get<std::size_t>(j, "packet_queue_depth", "", 64);
  c.host_queue_depth = get<std::size_t>(j, "host_queue_depth", "", 32);
  c.fifo_depth = get<unsigned>(j, "fifo_depth", "", 16);
  c.ca_insts_per_cycle = get<unsigned>(j, "ca_insts_per_cycle", "", 2);
  c.dispatch_window = get<unsigned>(j, "dispatch_window", "", 64);
  {
    const auto a = get<std::string>(j, "ca_arbiter", "", "most_remaining");
    if (a == "most_remaining") c.ca_arbiter = CaArbiter::most_remaining;
    else if (a == "round_robin") c.ca_arbiter = CaArbiter::round_robin;
    else throw ConfigError("ca_arbiter: expected most_remaining or round_robin, got '" + a + "'");
    const auto rr = get<std::string>(j, "rank_release", "", "on_sent");
    if (rr == "on_sent") c.rank_release = RankRelease::on_sent;
    else if (rr == "on_completion") c.rank_release = RankRelease::on_completion;
    else throw ConfigError("rank_release: expected on_sent or on_completion, got '" + rr + "'");
  }
  c.frfcfs = get<bool>(j, "frfcfs", "", true);
  c.functional_check = get<bool>(j, "functional_check", "", false);
  if (c.host_threads == 0) throw ConfigError("host_threads: must be >= 1");
  if (c.packet_queue_depth == 0) throw ConfigError("packet_queue_depth: must be >= 1");
  if (c.host_queue_depth == 0) throw ConfigError("host_queue_depth: must be >= 1");
  if (c.fifo_depth == 0) throw ConfigError("fifo_depth: must be >= 1");
  if (c.ca_insts_per_cycle == 0) throw ConfigError("ca_insts_per_cycle: must be >= 1");
  if (c.dispatch_window == 0) throw ConfigError("dispatch_window: must be >= 1");

  // Canonical echo of the resolved configuration.
  json r;
  r["seed"] = c.seed;
  r["memory"] = c.memory;
  json ms = json::object();
  for (const auto& [f, ranges] : c.mapping.slices) ms[std::string(to_string(f))] = format_bit_ranges(ranges);
  r["mapping"] = {{"rows_per_bank", c.mapping.rows_per_bank}, {"columns_per_row", c.mapping.columns_per_row},
                  {"bank_groups", c.mapping.bank_groups}, {"banks_per_group", c.mapping.banks_per_group},
                  {"bank_xor", c.mapping.bank_xor}, {"slices", ms}};
  r["page_policy"] = pp;
  r["trace"] = {{"source", t.source}, {"path", t.path}, {"tables", t.tables}, {"rows", t.rows},
                {"vec_bytes", t.vec_bytes}, {"dtype", std::string(to_string(t.dtype))}, {"batches", t.batches},
                {"poolings_per_batch", t.poolings_per_batch}, {"pooling_factor", t.pooling_factor},
                {"zipf_exponent", t.zipf_exponent}, {"weighted", t.weighted}, {"replication", t.replication}};
  r["poolings_per_packet"] = c.poolings_per_packet;
  r["variant"] = std::string(to_string(c.variant));
  r["scheduler"] = std::string(to_string(c.scheduler));
  r["profiler"] = {{"enabled", c.profiler.enabled}, {"candidates", c.profiler.candidates}};
  r["profiler"]["t"] = c.profiler.t ? json(*c.profiler.t) : json("auto");
  r["cache"] = {{"enabled", c.cache_enabled}, {"capacity_bytes", c.cache.capacity_bytes},
                {"line_bytes", c.cache.line_bytes}, {"ways", c.cache.ways}, {"latency_growth", c.latency_growth},
                {"latency_table", c.latency_table}};
  r["timing"] = {{"tRC", tm.tRC}, {"tRCD", tm.tRCD}, {"tCL", tm.tCL}, {"tRP", tm.tRP}, {"tBL", tm.tBL},
                 {"tCCD_S", tm.tCCD_S}, {"tCCD_L", tm.tCCD_L}, {"tRRD_S", tm.tRRD_S}, {"tRRD_L", tm.tRRD_L},
                 {"tFAW", tm.tFAW}, {"tRTP", tm.tRTP}};
  r["refresh"] = {{"enabled", c.refresh.enabled}, {"staggered", c.refresh.staggered}, {"tREFI", c.refresh.tREFI}, {"tRFC", c.refresh.tRFC}};
  r["energy"] = {{"act_nj", en.act_nj}, {"rdwr_pj_per_bit", en.rdwr_pj_per_bit}, {"io_pj_per_bit", en.io_pj_per_bit},
                 {"cache_pj_per_access", en.cache_pj_per_access}, {"add_pj", en.add_pj}, {"mult_pj", en.mult_pj}};
  r["host_threads"] = c.host_threads;
  r["packet_queue_depth"] = c.packet_queue_depth;
  r["host_queue_depth"] = c.host_queue_depth;
  r["fifo_depth"] = c.fifo_depth;
  r["ca_insts_per_cycle"] = c.ca_insts_per_cycle;
  r["dispatch_window"] = c.dispatch_window;
  r["ca_arbiter"] = c.ca_arbiter == CaArbiter::most_remaining ? "most_remaining" : "round_robin";
  r["rank_release"] = c.rank_release == RankRelease::on_sent ? "on_sent" : "on_completion";
  r["frfcfs"] = c.frfcfs;
  r["functional_check"] = c.functional_check;
  c.raw = std::move(r);
  return c;
}

inline ExperimentConfig load_config_file(const std::string& path, bool env_override = true) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(std::move(j), env_override);
}

/// Hash of the resolved config; reports from the same trace, seed and mapping
/// share the workload part of it.
inline std::string config_hash(const json& resolved) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << detail::fnv1a(resolved.dump());
  return os.str();
}

/// Hash of the inputs every variant must share for a speedup to be valid.
inline std::string workload_hash(const json& resolved) {
  json w;
  for (const char* k : {"seed", "memory", "mapping", "page_policy", "trace", "timing", "refresh", "host_queue_depth"})
    w[k] = resolved.at(k);
  return config_hash(w);
}

// ---------------------------------------------------------------------------
// Statistics

struct RankLoadStats {
  std::vector<double> shares;                 // per packet
  std::vector<std::uint64_t> histogram;       // 10 bins over (0, 1]
  double mean = 0.0;
  friend bool operator==(const RankLoadStats&, const RankLoadStats&) = default;
};

/// Per packet, the fraction of its instructions that land on its busiest rank.
inline RankLoadStats rank_load_stats(const std::vector<NMPPacket>& packets, const MappingConfig& m) {
  RankLoadStats s;
  s.histogram.assign(10, 0);
  const unsigned R = m.total_ranks();
  for (const auto& p : packets) {
    if (p.insts.empty()) continue;
    std::vector<std::uint64_t> per(R, 0);
    for (const auto& i : p.insts) ++per.at(i.rank_id);
    const double share = static_cast<double>(*std::max_element(per.begin(), per.end())) /
                         static_cast<double>(p.insts.size());
    s.shares.push_back(share);
    const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>(std::ceil(share * 10.0 - 1e-9)) - 1);
    ++s.histogram[bin];
    s.mean += share;
  }
  if (!s.shares.empty()) s.mean /= static_cast<double>(s.shares.size());
  return s;
}

/// Model-level speedup when a fraction f of time is SLS sped up by s and the
/// rest optionally improves by fc.
inline double end_to_end_speedup(double sls_fraction, double sls_speedup, double fc_fraction_improvement = 0.0) {
  if (!(sls_fraction >= 0.0 && sls_fraction <= 1.0)) throw ConfigError("sls_fraction must be in [0, 1]");
  if (!(sls_speedup >= 1.0)) throw ConfigError("sls_speedup must be >= 1");
  if (!(fc_fraction_improvement >= 0.0 && fc_fraction_improvement < 1.0))
    throw ConfigError("fc_fraction_improvement must be in [0, 1)");
  return 1.0 / ((1.0 - sls_fraction) * (1.0 - fc_fraction_improvement) + sls_fraction / sls_speedup);
}

struct SlsFraction {
  std::string model;
  unsigned batch;
  double fraction;
};

/// Measured SLS share of model execution time (inputs to the estimator).
/// Batch sizes not listed here are unavailable.
inline const std::vector<SlsFraction>& sls_fractions() {
  static const std::vector<SlsFraction> v = {
      {"RM1-small", 8, 0.372}, {"RM1-small", 256, 0.611}, {"RM1-large", 8, 0.506},
      {"RM1-large", 256, 0.713}, {"RM2-small", 8, 0.735}, {"RM2-large", 8, 0.689},
  };
  return v;
}

/// Reads `model,batch,fraction` rows (header line required).
inline std::vector<SlsFraction> read_sls_fractions(std::istream& is) {
  std::vector<SlsFraction> v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line == "model,batch,fraction") continue;
    std::istringstream ls(line);
    SlsFraction f;
    std::string batch, frac;
    if (!std::getline(ls, f.model, ',') || !std::getline(ls, batch, ',') || !std::getline(ls, frac))
      throw ParseError(n, "expected model,batch,fraction");
    try {
      std::size_t used = 0;
      f.batch = static_cast<unsigned>(std::stoul(batch, &used));
      if (used != batch.size()) throw std::invalid_argument(batch);
      f.fraction = std::stod(frac, &used);
      if (used != frac.size()) throw std::invalid_argument(frac);
    } catch (const std::logic_error&) {
      throw ParseError(n, "bad number");
    }
    if (!(f.fraction >= 0.0 && f.fraction <= 1.0)) throw ParseError(n, "fraction outside [0, 1]");
    v.push_back(std::move(f));
  }
  return v;
}

inline double lookup_sls_fraction(const std::string& model, unsigned batch,
                                  const std::vector<SlsFraction>& table = sls_fractions()) {
  for (const auto& f : table)
    if (f.model == model && f.batch == batch) return f.fraction;
  throw ConfigError("no SLS fraction available for " + model + " at batch " + std::to_string(batch));
}

/// Byte address of every lookup, in trace order. Without a page map the
/// tables sit back to back in one flat space.
inline std::vector<std::uint64_t> trace_addresses(const Trace& t, const PageMap* pages = nullptr) {
  std::map<std::uint32_t, std::uint64_t> base;
  std::uint64_t next = 0;
  for (const auto& spec : t.tables) {
    base[spec.table_id] = next;
    next += (spec.footprint_bytes() + 4095) / 4096 * 4096;
  }
  std::vector<std::uint64_t> out;
  for (const auto& k : t.batches)
    for (const auto& p : k.poolings) {
      const auto& spec = t.table(p.table_id);
      for (auto i : p.indices)
        out.push_back(pages ? pages->row_address(spec, i) : base.at(p.table_id) + i * spec.row_stride());
    }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct CacheSummary {
  std::uint64_t accesses = 0, hits = 0, misses = 0, bypasses = 0, evictions = 0;
  double hit_rate = 0.0;
  std::vector<double> per_rank_hit_rate;
  friend bool operator==(const CacheSummary&, const CacheSummary&) = default;
};

struct RankSummary {
  std::uint64_t insts = 0, dram_reads = 0, acts = 0;
  Cycle busy_cycles = 0;
  friend bool operator==(const RankSummary&, const RankSummary&) = default;
};

struct BaselineSummary {
  Cycle cycles = 0;
  std::uint64_t reads = 0, acts = 0, row_hits = 0;
  double ca_occupancy = 0.0;
  friend bool operator==(const BaselineSummary&, const BaselineSummary&) = default;
};

struct FunctionalSummary {
  bool checked = false;
  std::uint64_t tags = 0;
  double max_rel_err = 0.0;
  friend bool operator==(const FunctionalSummary&, const FunctionalSummary&) = default;
};

struct SimReport {
  std::string version;
  std::string timestamp;
  std::string config_hash;
  std::string workload_hash;
  json config;
  std::string variant;
  Cycle cycles = 0;
  double ns = 0.0;
  BaselineSummary baseline;
  double baseline_ns = 0.0;
  double speedup = 1.0;
  double normalized_latency = 1.0;
  std::uint64_t packets = 0;
  std::uint64_t insts = 0;
  CacheSummary cache;
  RankLoadStats rank_load;
  std::vector<RankSummary> ranks;
  EnergyReport energy_baseline;
  EnergyReport energy;
  double energy_savings_pct = 0.0;
  std::map<std::uint32_t, std::uint64_t> profiler_thresholds;  // chosen t -> kernels
  FunctionalSummary functional;
  std::vector<std::string> notes;

  friend bool operator==(const SimReport&, const SimReport&) = default;
};

inline void to_json(json& j, const EnergyReport& e) {
  j = {{"activate", e.activate}, {"dram_rd", e.dram_rd}, {"io", e.io}, {"cache", e.cache},
       {"arithmetic", e.arithmetic}, {"total", e.total()}};
}
inline void from_json(const json& j, EnergyReport& e) {
  e.activate = j.at("activate");
  e.dram_rd = j.at("dram_rd");
  e.io = j.at("io");
  e.cache = j.at("cache");
  e.arithmetic = j.at("arithmetic");
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CacheSummary, accesses, hits, misses, bypasses, evictions, hit_rate, per_rank_hit_rate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RankSummary, insts, dram_reads, acts, busy_cycles)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BaselineSummary, cycles, reads, acts, row_hits, ca_occupancy)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FunctionalSummary, checked, tags, max_rel_err)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RankLoadStats, shares, histogram, mean)

inline void to_json(json& j, const SimReport& r) {
  j = json{{"version", r.version}, {"timestamp", r.timestamp}, {"config_hash", r.config_hash},
           {"workload_hash", r.workload_hash}, {"config", r.config}, {"variant", r.variant},
           {"cycles", r.cycles}, {"ns", r.ns}, {"baseline", r.baseline}, {"baseline_ns", r.baseline_ns},
           {"speedup", r.speedup}, {"normalized_latency", r.normalized_latency}, {"packets", r.packets},
           {"insts", r.insts}, {"cache", r.cache}, {"rank_load", r.rank_load}, {"ranks", r.ranks},
           {"energy", {{"baseline", r.energy_baseline}, {"variant", r.energy}, {"savings_pct", r.energy_savings_pct}}},
           {"functional", r.functional}, {"notes", r.notes}};
  json th = json::object();
  for (const auto& [t, n] : r.profiler_thresholds) th[std::to_string(t)] = n;
  j["profiler_thresholds"] = th;
}

inline void from_json(const json& j, SimReport& r) {
  j.at("version").get_to(r.version);
  j.at("timestamp").get_to(r.timestamp);
  j.at("config_hash").get_to(r.config_hash);
  j.at("workload_hash").get_to(r.workload_hash);
  r.config = j.at("config");
  j.at("variant").get_to(r.variant);
  j.at("cycles").get_to(r.cycles);
  j.at("ns").get_to(r.ns);
  j.at("baseline").get_to(r.baseline);
  j.at("baseline_ns").get_to(r.baseline_ns);
  j.at("speedup").get_to(r.speedup);
  j.at("normalized_latency").get_to(r.normalized_latency);
  j.at("packets").get_to(r.packets);
  j.at("insts").get_to(r.insts);
  j.at("cache").get_to(r.cache);
  j.at("rank_load").get_to(r.rank_load);
  j.at("ranks").get_to(r.ranks);
  j.at("energy").at("baseline").get_to(r.energy_baseline);
  j.at("energy").at("variant").get_to(r.energy);
  j.at("energy").at("savings_pct").get_to(r.energy_savings_pct);
  j.at("functional").get_to(r.functional);
  j.at("notes").get_to(r.notes);
  r.profiler_thresholds.clear();
  for (const auto& [k, v] : j.at("profiler_thresholds").items())
    r.profiler_thresholds[static_cast<std::uint32_t>(std::stoul(k))] = v.get<std::uint64_t>();
}

enum class ReportFormat { json, csv };

inline const std::vector<std::string>& report_csv_columns() {
  static const std::vector<std::string> cols = {
      "variant", "memory", "poolings_per_packet", "cycles", "baseline_cycles", "speedup", "normalized_latency",
      "hit_rate", "mean_max_rank_share", "energy_nj", "baseline_energy_nj", "energy_savings_pct", "config_hash"};
  return cols;
}

inline std::vector<std::string> report_csv_values(const SimReport& r) {
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
  };
  return {r.variant,
          r.config.value("memory", ""),
          std::to_string(r.config.value("poolings_per_packet", 0)),
          std::to_string(r.cycles),
          std::to_string(r.baseline.cycles),
          num(r.speedup),
          num(r.normalized_latency),
          num(r.cache.hit_rate),
          num(r.rank_load.mean),
          num(r.energy.total()),
          num(r.energy_baseline.total()),
          num(r.energy_savings_pct),
          r.config_hash};
}

inline void emit_report(const SimReport& r, ReportFormat f, std::ostream& os) {
  if (f == ReportFormat::json) {
    os << json(r).dump(2) << '\n';
    return;
  }
  const auto& cols = report_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  const auto vals = report_csv_values(r);
  for (std::size_t i = 0; i < vals.size(); ++i) os << (i ? "," : "") << vals[i];
  os << '\n';
}

inline void emit_report(const SimReport& r, ReportFormat f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report '" + path + "'");
  emit_report(r, f, out);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Experiment pipeline

/// Everything a run produced, beyond the report.
struct RunArtifacts {
  Trace trace;
  PageMap pages;
  std::vector<NMPPacket> packets;  // dispatch order, tags assigned
  HostResult host;
  std::optional<NmpResult> nmp;
};

inline Trace build_trace(const ExperimentConfig& c) {
  const auto& t = c.trace;
  if (t.source == "file") return read_trace_file(t.path);
  // One trace per table, co-located by interleaving (Comb-N).
  const auto tables = make_tables(t.tables, t.rows, t.vec_bytes, t.dtype);
  std::vector<Trace> parts;
  for (const auto& spec : tables) {
    const std::uint64_t s = derive_seed(c.seed, 100 + spec.table_id);
    parts.push_back(t.source == "random"
                        ? gen_random_trace({spec}, t.batches, t.poolings_per_batch, t.pooling_factor, s, t.weighted)
                        : gen_locality_trace({spec}, t.batches, t.poolings_per_batch, t.pooling_factor,
                                             t.zipf_exponent, s, t.weighted));
  }
  return interleave_traces(parts, t.replication);
}

inline PageMap build_pages(const ExperimentConfig& c, const Trace& trace) {
  const std::uint64_t s = derive_seed(c.seed, 2);
  return c.page_policy == PagePolicy::colored ? allocate_pages_colored(trace.tables, c.mapping, {}, s)
                                              : allocate_pages(trace.tables, c.mapping, s);
}

inline EnergyEvents baseline_events(const HostResult& h) {
  EnergyEvents e;
  e.activates = h.channel.total_acts();
  e.dram_bits_read = h.reads * 512;
  e.io_bits = h.reads * 512;
  return e;
}

inline EnergyEvents nmp_events(const NmpResult& r, const std::vector<NMPPacket>& packets) {
  EnergyEvents e;
  e.activates = r.channel.total_acts();
  e.dram_bits_read = r.channel.total_reads() * 512;
  e.io_bits = r.pu.insts * InstLayout::total + r.pu.sum_bits_out;
  const CacheStats cs = r.pu.cache_total();
  e.cache_accesses = cs.hits + 2 * cs.misses;  // lookups plus line fills
  std::uint64_t elems = 0;
  for (const auto& p : packets) elems += static_cast<std::uint64_t>(p.insts.size()) * p.elements;
  // Per element: dequantize (scalar * q + bias), weight multiply, accumulate.
  e.mults = 2 * elems;
  e.adds = 2 * elems + r.pu.tree_adds;
  return e;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline SimReport run_experiment(const ExperimentConfig& c, RunArtifacts* artifacts = nullptr) {
  RunArtifacts a;
  a.trace = build_trace(c);
  a.trace.validate();
  a.pages = build_pages(c, a.trace);

  SimReport rep;
  rep.version = std::string(kVersion);
  rep.timestamp = utc_timestamp();
  rep.config = c.raw;
  rep.config_hash = config_hash(c.raw);
  rep.workload_hash = workload_hash(c.raw);
  rep.variant = std::string(to_string(c.variant));
  rep.notes.push_back("static and leakage energy excluded");
  rep.notes.push_back("hot-entry profiling cost (<2% of end-to-end time) excluded from memory latency");
  if (c.refresh.enabled) rep.notes.push_back("refresh modeled as periodic rank blackout (tREFI/tRFC)");

  // Host baseline: every kernel's reads, in trace order.
  std::vector<HostRequest> reqs;
  for (const auto& k : a.trace.batches) {
    auto r = host_baseline_stream(k, a.trace, a.pages, c.mapping);
    reqs.insert(reqs.end(), r.begin(), r.end());
  }
  {
    Channel ch(c.mapping, c.timing, BusTopology::shared_channel, c.refresh, c.log_commands);
    a.host = run_host(reqs, ch, {c.host_queue_depth, c.log_commands});
  }
  rep.baseline = {a.host.cycles, a.host.reads, a.host.channel.total_acts(), a.host.row_hits, a.host.ca_occupancy()};
  rep.baseline_ns = cycles_to_ns(a.host.cycles);
  rep.energy_baseline = account(baseline_events(a.host), c.energy);

  if (c.variant == Variant::baseline) {
    rep.cycles = a.host.cycles;
    rep.ns = rep.baseline_ns;
    rep.speedup = rep.normalized_latency = 1.0;
    rep.energy = rep.energy_baseline;
    rep.energy_savings_pct = 0.0;
    if (artifacts) *artifacts = std::move(a);
    return rep;
  }

  // Packet generation, with optional hot-entry hints.
  std::vector<std::vector<NMPPacket>> per_kernel;
  std::uint64_t next_id = 0;
  for (const auto& k : a.trace.batches) {
    std::optional<LocalityBits> bits;
    if (c.profiler.enabled) {
      const std::uint32_t t = c.profiler.t ? *c.profiler.t
                                           : sweep_threshold(k, a.trace, c.profiler.candidates, c.cache);
      ++rep.profiler_thresholds[t];
      bits = profile_hot_entries(k, t);
    }
    per_kernel.push_back(build_packets(k, a.trace, a.pages, c.mapping, c.poolings_per_packet,
                                       bits ? &*bits : nullptr, next_id));
    next_id += per_kernel.back().size();
  }
  auto arrivals = arrival_order(std::move(per_kernel), c.host_threads, c.seed);
  a.packets = schedule_packets(std::move(arrivals), c.scheduler, c.packet_queue_depth);
  finalize_schedule(a.packets, c.mapping, c.cache_enabled ? std::optional<CacheConfig>(c.cache) : std::nullopt,
                    c.frfcfs);

  NmpSimulator sim(c.mapping, c.timing, c.nmp_config());
  a.nmp = sim.run(a.packets);
  const NmpResult& r = *a.nmp;

  rep.cycles = r.cycles;
  rep.ns = cycles_to_ns(r.cycles);
  rep.speedup = r.cycles > 0 ? static_cast<double>(a.host.cycles) / static_cast<double>(r.cycles) : 1.0;
  rep.normalized_latency = a.host.cycles > 0 ? static_cast<double>(r.cycles) / static_cast<double>(a.host.cycles) : 1.0;
  rep.packets = a.packets.size();
  rep.insts = r.pu.insts;
  const CacheStats cs = r.pu.cache_total();
  rep.cache = {cs.accesses, cs.hits, cs.misses, cs.bypasses, cs.evictions, cs.hit_rate(), {}};
  for (const auto& rk : r.pu.ranks) {
    rep.cache.per_rank_hit_rate.push_back(rk.cache.hit_rate());
    rep.ranks.push_back({rk.insts, rk.dram_reads, rk.acts, rk.busy_cycles});
  }
  rep.rank_load = rank_load_stats(a.packets, c.mapping);
  rep.energy = account(nmp_events(r, a.packets), c.energy);
  rep.energy_savings_pct = rep.energy.savings_vs(rep.energy_baseline);

  if (c.functional_check) {
    // Compare every tag against the oracle over the original pooling order.
    rep.functional.checked = true;
    std::map<std::uint32_t, SyntheticTable> tables;
    for (const auto& t : a.trace.tables) tables.emplace(t.table_id, SyntheticTable(t, derive_seed(c.seed, 3)));
    auto table_for = [&](std::uint32_t id) -> const SyntheticTable& { return tables.at(id); };
    for (const auto& p : a.packets) {
      const auto sums = execute_packet(p, c.mapping, table_for);
      // Rebuild each tag's pooling from the packet in build order.
      std::vector<Pooling> pools(p.num_tags);
      for (unsigned tag = 0; tag < p.num_tags; ++tag) pools[tag].table_id = p.table_id;
      for (std::size_t i = 0; i < p.insts.size(); ++i) {
        auto& pl = pools[p.insts[i].psum_tag];
        pl.indices.push_back(p.rows[i]);
        if (!pl.weights) pl.weights.emplace();
        pl.weights->push_back(p.insts[i].weight);
      }
      for (unsigned tag = 0; tag < p.num_tags; ++tag) {
        const auto ref = sls_reference(tables.at(p.table_id), pools[tag],
                                       is_quantized(p.op_kind) ? OpKind::quantized_weighted_sum : OpKind::weighted_sum);
        for (std::size_t e = 0; e < ref.size(); ++e) {
          const double err = std::abs(static_cast<double>(sums.per_tag[tag][e]) - ref[e]) / (std::abs(ref[e]) + 1.0);
          rep.functional.max_rel_err = std::max(rep.functional.max_rel_err, err);
        }
        ++rep.functional.tags;
      }
    }
  }
  if (artifacts) *artifacts = std::move(a);
  return rep;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepParam {
  std::string key;  // config path ("cache.capacity_bytes"); "config" and "packet_size" are aliases
  std::vector<std::string> values;
};

inline SweepParam parse_sweep_param(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("--param: expected key=v1,v2,...");
  SweepParam p;
  p.key = spec.substr(0, eq);
  std::string rest = spec.substr(eq + 1);
  std::size_t start = 0;
  while (true) {
    const auto comma = rest.find(',', start);
    p.values.push_back(rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  for (const auto& v : p.values)
    if (v.empty()) throw ConfigError("--param " + p.key + ": empty value");
  return p;
}

inline json apply_param(json doc, const std::string& key, const std::string& value) {
  std::string path = key == "config" ? "memory" : key == "packet_size" ? "poolings_per_packet" : key;
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;
  }
  json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[part] = v;
      break;
    }
    if (!cur->contains(part)) (*cur)[part] = json::object();
    cur = &(*cur)[part];
    start = dot + 1;
  }
  return doc;
}

struct SweepRow {
  std::vector<std::string> values;  // parallel to the sweep params
  SimReport report;
};

/// Runs the cartesian product of parameter values. Points are independent and
/// run concurrently; rows come back in product order.
inline std::vector<SweepRow> run_sweep(const json& base, const std::vector<SweepParam>& params,
                                       unsigned max_parallel = 0) {
  std::vector<std::vector<std::string>> points{{}};
  for (const auto& p : params) {
    std::vector<std::vector<std::string>> next;
    for (const auto& pt : points)
      for (const auto& v : p.values) {
        auto q = pt;
        q.push_back(v);
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  if (params.empty()) return {};
  std::vector<ExperimentConfig> cfgs;
  for (const auto& pt : points) {
    json doc = base;
    for (std::size_t i = 0; i < params.size(); ++i) doc = apply_param(std::move(doc), params[i].key, pt[i]);
    cfgs.push_back(parse_config(std::move(doc)));
  }
  if (max_parallel == 0) max_parallel = std::max(1u, std::thread::hardware_concurrency());
  std::vector<SweepRow> rows(points.size());
  for (std::size_t start = 0; start < points.size(); start += max_parallel) {
    std::vector<std::future<SimReport>> jobs;
    const std::size_t end = std::min(points.size(), start + max_parallel);
    for (std::size_t i = start; i < end; ++i)
      jobs.push_back(std::async(std::launch::async, [&cfgs, i] { return run_experiment(cfgs[i]); }));
    for (std::size_t i = start; i < end; ++i) rows[i] = {points[i], jobs[i - start].get()};
  }
  return rows;
}

inline void emit_sweep_csv(const std::vector<SweepParam>& params, const std::vector<SweepRow>& rows, std::ostream& os) {
  for (const auto& p : params) os << p.key << ',';
  os << "variant,cycles,baseline_cycles,speedup,normalized_latency,hit_rate,energy_savings_pct\n";
  for (const auto& row : rows) {
    for (const auto& v : row.values) os << v << ',';
    const auto& r = row.report;
    os << r.variant << ',' << r.cycles << ',' << r.baseline.cycles << ',' << std::setprecision(10) << r.speedup << ','
       << r.normalized_latency << ',' << r.cache.hit_rate << ',' << r.energy_savings_pct << '\n';
  }
}

}  // namespace recnmp
