// recnmp: command-line front end for the simulator.
//
//   recnmp simulate <config.json> [--format json|csv] [--out FILE] [--commands FILE] [--energy FILE]
//   recnmp locality <trace> [--capacities 8M,16M,...] [--lines 64,...] [--ways N] [--full-assoc]
//   recnmp sweep <config.json> --param key=v1,v2 [--param ...] [--out FILE] [--jobs N]
//   recnmp estimate --f FRAC --s SPEEDUP [--fc IMPROVEMENT] | --model NAME --batch N --s SPEEDUP
//   recnmp gen-trace [config.json] [--source ...] [--out FILE]
//
// Exit status: 0 ok, 2 bad configuration or arguments, 3 runtime failure.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "recnmp/harness.hpp"
#include "recnmp/trace_io.hpp"

using namespace recnmp;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::uint64_t parse_size(const std::string& s) {
  if (s.empty()) throw ConfigError("empty size");
  std::uint64_t mult = 1;
  std::string digits = s;
  const char last = static_cast<char>(std::toupper(static_cast<unsigned char>(s.back())));
  if (last == 'K' || last == 'M' || last == 'G') {
    mult = last == 'K' ? 1024ULL : last == 'M' ? kMiB : 1024ULL * kMiB;
    digits.pop_back();
  } else if (s.size() > 2 && (s.ends_with("KB") || s.ends_with("MB") || s.ends_with("GB"))) {
    return parse_size(s.substr(0, s.size() - 1));
  }
  try {
    std::size_t used = 0;
    const auto v = std::stoull(digits, &used);
    if (used != digits.size()) throw std::invalid_argument(s);
    return v * mult;
  } catch (const std::logic_error&) {
    throw ConfigError("bad size '" + s + "'");
  }
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot write '" + path + "'");
  return file;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RecNMP cycle-level simulator"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "run one experiment and print its report");
  std::string sim_config, sim_format = "json", sim_out, sim_cmds, sim_energy;
  bool sim_check = false;
  sim->add_option("config", sim_config, "experiment config (JSON)")->required();
  sim->add_option("--format", sim_format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
  sim->add_option("--out", sim_out, "report destination (default stdout)");
  sim->add_option("--commands", sim_cmds, "write the issued DDR command log as CSV");
  sim->add_option("--energy", sim_energy, "write the energy breakdown as CSV");
  sim->add_flag("--check", sim_check, "verify every NMP sum against the reference");

  // locality
  auto* loc = app.add_subcommand("locality", "cache hit-rate sweep over a trace file");
  std::string loc_trace, loc_out;
  std::vector<std::string> loc_caps = {"8M", "16M", "32M", "64M"};
  std::vector<unsigned> loc_lines = {64};
  unsigned loc_ways = 4;
  bool loc_fa = false;
  loc->add_option("trace", loc_trace, "trace file")->required();
  loc->add_option("--capacities", loc_caps, "cache capacities (K/M suffixes)")->delimiter(',');
  loc->add_option("--lines", loc_lines, "line sizes in bytes")->delimiter(',');
  loc->add_option("--ways", loc_ways, "associativity");
  loc->add_flag("--full-assoc", loc_fa, "fully associative");
  loc->add_option("--out", loc_out, "CSV destination (default stdout)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "run a parameter sweep and print CSV rows");
  std::string sw_config, sw_out;
  std::vector<std::string> sw_params;
  unsigned sw_jobs = 0;
  sw->add_option("config", sw_config, "base experiment config (JSON)")->required();
  sw->add_option("--param", sw_params, "key=v1,v2,... (repeatable; cartesian product)")->required();
  sw->add_option("--out", sw_out, "CSV destination (default stdout)");
  sw->add_option("--jobs", sw_jobs, "concurrent experiments (default: hardware threads)");

  // estimate
  auto* est = app.add_subcommand("estimate", "end-to-end model speedup from an SLS speedup");
  double est_f = -1.0, est_s = 0.0, est_fc = 0.0;
  std::string est_model, est_fractions;
  unsigned est_batch = 0;
  auto* f_opt = est->add_option("--f", est_f, "SLS fraction of model time");
  est->add_option("--s", est_s, "SLS speedup")->required();
  est->add_option("--fc", est_fc, "fractional improvement of non-SLS time");
  auto* m_opt = est->add_option("--model", est_model, "look up the SLS fraction for a model");
  est->add_option("--batch", est_batch, "batch size for --model")->needs(m_opt);
  est->add_option("--fractions", est_fractions, "model,batch,fraction CSV (default: built-in table)");
  f_opt->excludes(m_opt);

  // gen-trace
  auto* gen = app.add_subcommand("gen-trace", "write a synthetic trace");
  std::string gen_config, gen_out, gen_source, gen_dtype;
  std::optional<std::uint32_t> gen_tables, gen_vec, gen_batches, gen_ppb, gen_pf, gen_rep;
  std::optional<std::uint64_t> gen_rows, gen_seed;
  std::optional<double> gen_zipf;
  bool gen_weighted = false;
  gen->add_option("config", gen_config, "experiment config whose trace section is used");
  gen->add_option("--source", gen_source, "random or locality")->check(CLI::IsMember({"random", "locality"}));
  gen->add_option("--tables", gen_tables);
  gen->add_option("--rows", gen_rows);
  gen->add_option("--vec-bytes", gen_vec);
  gen->add_option("--dtype", gen_dtype)->check(CLI::IsMember({"fp32", "int8q"}));
  gen->add_option("--batches", gen_batches);
  gen->add_option("--poolings-per-batch", gen_ppb);
  gen->add_option("--pooling-factor", gen_pf);
  gen->add_option("--zipf", gen_zipf);
  gen->add_option("--replication", gen_rep);
  gen->add_option("--seed", gen_seed);
  gen->add_flag("--weighted", gen_weighted);
  gen->add_option("--out", gen_out, "trace destination (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*sim) {
      auto cfg = load_config_file(sim_config);
      cfg.log_commands = !sim_cmds.empty();
      if (sim_check) cfg.functional_check = true;
      RunArtifacts art;
      const SimReport rep = run_experiment(cfg, &art);
      std::ofstream file;
      emit_report(rep, sim_format == "json" ? ReportFormat::json : ReportFormat::csv, open_out(sim_out, file));
      if (!sim_cmds.empty()) {
        std::ofstream cf(sim_cmds);
        if (!cf) throw std::runtime_error("cannot write '" + sim_cmds + "'");
        write_command_csv(art.nmp ? art.nmp->log : art.host.log, cf);
      }
      if (!sim_energy.empty()) {
        std::ofstream ef(sim_energy);
        if (!ef) throw std::runtime_error("cannot write '" + sim_energy + "'");
        write_energy_csv(rep.energy, ef, rep.variant);
      }
      if (rep.functional.checked && rep.functional.max_rel_err > 1e-6) {
        std::cerr << "functional check failed: max relative error " << rep.functional.max_rel_err << '\n';
        return kExitRuntime;
      }
    } else if (*loc) {
      const Trace t = read_trace_file(loc_trace);
      const auto addr = trace_addresses(t);
      std::vector<CacheConfig> cfgs;
      for (const auto& c : loc_caps)
        for (auto l : loc_lines) {
          CacheConfig cc{parse_size(c), l, loc_ways, true, loc_fa};
          cc.validate();
          cfgs.push_back(cc);
        }
      std::ofstream file;
      auto& os = open_out(loc_out, file);
      os << "capacity,line,ways,hit_rate\n";
      for (const auto& cc : cfgs) {
        const auto p = detail::simulate_point(addr, cc);
        os << p.capacity_bytes << ',' << p.line_bytes << ',' << p.ways << ',' << std::setprecision(10) << p.hit_rate
           << '\n';
      }
    } else if (*sw) {
      const json base = read_json_file(sw_config);
      std::vector<SweepParam> params;
      for (const auto& p : sw_params) params.push_back(parse_sweep_param(p));
      const auto rows = run_sweep(base, params, sw_jobs);
      std::ofstream file;
      emit_sweep_csv(params, rows, open_out(sw_out, file));
    } else if (*est) {
      double f = est_f;
      if (!est_model.empty()) {
        if (est_batch == 0) throw ConfigError("--model requires --batch");
        if (est_fractions.empty()) {
          f = lookup_sls_fraction(est_model, est_batch);
        } else {
          std::ifstream in(est_fractions);
          if (!in) throw ConfigError("cannot open '" + est_fractions + "'");
          f = lookup_sls_fraction(est_model, est_batch, read_sls_fractions(in));
        }
      } else if (f < 0.0) {
        throw ConfigError("estimate needs --f or --model/--batch");
      }
      std::cout << std::setprecision(6) << end_to_end_speedup(f, est_s, est_fc) << '\n';
    } else if (*gen) {
      json doc = gen_config.empty() ? json::object() : read_json_file(gen_config);
      json& tr = doc["trace"];
      if (tr.is_null()) tr = json::object();
      if (!gen_source.empty()) tr["source"] = gen_source;
      if (!gen_dtype.empty()) tr["dtype"] = gen_dtype;
      if (gen_tables) tr["tables"] = *gen_tables;
      if (gen_rows) tr["rows"] = *gen_rows;
      if (gen_vec) tr["vec_bytes"] = *gen_vec;
      if (gen_batches) tr["batches"] = *gen_batches;
      if (gen_ppb) tr["poolings_per_batch"] = *gen_ppb;
      if (gen_pf) tr["pooling_factor"] = *gen_pf;
      if (gen_zipf) tr["zipf_exponent"] = *gen_zipf;
      if (gen_rep) tr["replication"] = *gen_rep;
      if (gen_weighted) tr["weighted"] = true;
      if (gen_seed) doc["seed"] = *gen_seed;
      const auto cfg = parse_config(doc);
      if (cfg.trace.source == "file") throw ConfigError("trace.source: gen-trace needs a generator source");
      std::ofstream file;
      write_trace(build_trace(cfg), open_out(gen_out, file));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
