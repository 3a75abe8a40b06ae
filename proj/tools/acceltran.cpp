#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acceltran/error.hpp"
#include "acceltran/io.hpp"
#include "acceltran/report.hpp"
#include "acceltran/sim.hpp"

namespace fs = std::filesystem;
using namespace acceltran;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDeadlock = 3, kIo = 4 };

struct Globals {
  std::uint64_t seed = 42;
  std::string out = "out";
  bool quiet = false;
};

struct SimArgs {
  std::string model = "bert-tiny";
  std::string hw = "acceltran-edge";
  std::string energy = "energy-14nm-default";
  std::optional<double> tau;
  std::optional<double> rho;
  std::string profile_dir = "profiles";
  std::string dataflow = "bijk";
  std::optional<std::size_t> seq_len;
  bool equal_priority = false;
  bool compare = false;
  bool trace = false;
  bool padded_timing = false;
  bool compressed = false;
  bool prune_weights = false;
};

void add_sim_options(CLI::App* cmd, SimArgs& a) {
  cmd->add_option("--model", a.model, "model preset or JSON path")->capture_default_str();
  cmd->add_option("--hw", a.hw, "hardware preset or JSON path")->capture_default_str();
  cmd->add_option("--energy", a.energy, "energy model preset or JSON path")->capture_default_str();
  auto* tau = cmd->add_option("--tau", a.tau, "fixed DynaTran threshold");
  cmd->add_option("--rho", a.rho, "target activation sparsity, looked up in the model's profile")
      ->excludes(tau);
  cmd->add_option("--profile-dir", a.profile_dir, "where profiles/<model>.json live")
      ->capture_default_str();
  cmd->add_option("--dataflow", a.dataflow, "loop order, e.g. bijk")->capture_default_str();
  cmd->add_option("--seq-len", a.seq_len, "override the model's sequence length");
  cmd->add_flag("--equal-priority", a.equal_priority, "schedule heads in lockstep");
  cmd->add_flag("--padded-timing", a.padded_timing, "time every padded MAC");
  cmd->add_flag("--compressed-datapath", a.compressed, "run tiles through the sparse datapath");
  cmd->add_flag("--prune-weights", a.prune_weights, "let DynaTran prune weights too");
}

struct Setup {
  model::ModelConfig cfg;
  arch::HardwareConfig hw;
  arch::EnergyModel energy;
  sim::SimOptions opts;
  io::Provenance prov;
};

Setup make_setup(const SimArgs& a, const Globals& g) {
  Setup s;
  s.cfg = io::load_model(a.model);
  s.hw = io::load_hardware(a.hw);
  s.energy = io::load_energy(a.energy);
  s.cfg.batch = s.hw.batch;
  if (a.seq_len) s.cfg.seq_len = *a.seq_len;
  s.cfg = model::validate_config(s.cfg);

  s.opts.seed = g.seed;
  s.opts.tau = a.tau;
  s.opts.stagger = !a.equal_priority;
  s.opts.trace = a.trace;
  s.opts.dataflow = tiling::Dataflow::parse(a.dataflow);
  s.opts.sparsity_aware = !a.padded_timing;
  s.opts.compressed_datapath = a.compressed;
  s.opts.prune_weights = a.prune_weights;
  if (a.rho) {
    const fs::path p = fs::path(a.profile_dir) / (s.cfg.name + ".json");
    if (!fs::exists(p)) {
      throw ConfigError("no sparsity profile at " + p.string() + "; run `acceltran profile --model " +
                        a.model + "` first");
    }
    s.opts.rho_target = a.rho;
    s.opts.profile = io::load_profile(p);
  }
  sim::validate(s.opts);

  s.prov.seed = g.seed;
  s.prov.config_hashes = {{"model", io::fnv1a(io::dump(s.cfg))},
                          {"hardware", io::fnv1a(io::dump(s.hw))},
                          {"energy", io::fnv1a(io::dump(s.energy))}};
  if (s.opts.profile) s.prov.config_hashes.emplace_back("profile", io::fnv1a(io::dump(*s.opts.profile)));
  return s;
}

std::string schedule_summary(const sim::ScheduleComparison& c) {
  std::ostringstream os;
  const auto st = c.staggered.metrics.total_cycles;
  const auto eq = c.equal.metrics.total_cycles;
  os << "staggered cycles  " << st << "\n";
  os << "equal cycles      " << eq << "\n";
  os << "difference        " << static_cast<std::int64_t>(st) - static_cast<std::int64_t>(eq) << "\n";
  return os.str();
}

int cmd_simulate(const SimArgs& a, const Globals& g) {
  Setup s = make_setup(a, g);
  const fs::path out(g.out);
  const std::string header = io::provenance_header(s.prov);

  if (a.compare) {
    const auto cmp = sim::compare_schedules(s.cfg, s.hw, s.energy, s.opts);
    const std::string text = header + schedule_summary(cmp);
    io::write_file(out / "metrics.json", io::metrics_json(cmp.staggered.metrics, s.prov));
    io::write_file(out / "metrics_equal.json", io::metrics_json(cmp.equal.metrics, s.prov));
    io::write_file(out / "schedule_compare.txt", text);
    if (!g.quiet) std::cout << text;
    return kOk;
  }

  const auto r = sim::run(s.cfg, s.hw, s.energy, s.opts);
  const std::string summary = io::summary_text(r.metrics);
  if (a.trace) {
    io::write_file(out / "trace.csv", header + sim::utilization_csv(r, s.energy));
    io::write_file(out / "schedule.csv", header + sim::schedule_csv(r));
  }
  io::write_file(out / "metrics.json", io::metrics_json(r.metrics, s.prov));
  io::write_file(out / "summary.txt", header + summary);
  if (!g.quiet) std::cout << summary;
  return kOk;
}

int cmd_profile(const std::string& model_name, const std::string& hw_name,
                const std::optional<std::vector<double>>& grid, const std::string& dir,
                std::optional<std::size_t> seq_len, const Globals& g) {
  auto cfg = io::load_model(model_name);
  const auto hw = io::load_hardware(hw_name);
  cfg.batch = hw.batch;  // same token stream as simulate
  if (seq_len) cfg.seq_len = *seq_len;
  cfg = model::validate_config(cfg);
  const std::vector<double> taus = grid ? *grid : sparsity::default_tau_grid();
  if (taus.empty()) throw ConfigError("tau grid is empty");

  const auto graph = model::build_op_graph(cfg);
  const auto weights = numerics::generate_weights(graph, cfg, hw.fmt, g.seed);
  const auto tokens = numerics::generate_tokens(cfg, g.seed);
  const auto profile = sparsity::profile_thresholds(cfg, weights, tokens, hw.fmt, taus);

  io::Provenance prov;
  prov.seed = g.seed;
  prov.config_hashes = {{"model", io::fnv1a(io::dump(cfg))}, {"hardware", io::fnv1a(io::dump(hw))}};
  const fs::path path = fs::path(dir) / (cfg.name + ".json");
  io::write_file(path, io::profile_json(profile, prov));
  if (!g.quiet) {
    std::cout << "tau,rho\n";
    for (const auto& p : profile.points) std::cout << p.tau << "," << p.rho << "\n";
    std::cout << "wrote " << path.string() << "\n";
  }
  return kOk;
}

int cmd_dataflow_sweep(std::size_t lanes, const std::string& policy, const std::string& energy_name,
                       const Globals& g) {
  const auto energy = io::load_energy(energy_name);
  const tiling::TileSpec spec;
  const auto costs = report::tile_costs(energy, spec, numerics::FixedFormat{});
  const auto rows = report::dataflow_sweep(report::default_scenarios(), spec, lanes, costs,
                                           tiling::parse_reuse_policy(policy));
  io::Provenance prov;
  prov.seed = g.seed;
  prov.config_hashes = {{"energy", io::fnv1a(io::dump(energy))}};
  const std::string csv = report::dataflow_sweep_csv(rows);
  io::write_file(fs::path(g.out) / "dataflow_sweep.csv", io::provenance_header(prov) + csv);
  if (!g.quiet) std::cout << csv;
  return kOk;
}

int cmd_design_sweep(const SimArgs& a, std::vector<std::size_t> pes,
                     std::vector<double> buffers_mib, const Globals& g) {
  Setup s = make_setup(a, g);
  std::vector<std::uint64_t> buffers;
  for (double mib : buffers_mib) {
    if (!(mib > 0)) throw ConfigError("buffer sizes must be positive");
    buffers.push_back(static_cast<std::uint64_t>(mib * (1 << 20)));
  }
  if (pes.empty() && buffers.empty()) {
    pes = sim::default_sweep_pes();
    buffers = sim::default_sweep_buffers();
  }
  const auto rows = sim::design_sweep(s.cfg, s.hw, s.energy, s.opts, pes, buffers);
  const std::string csv = report::design_sweep_csv(rows);
  io::write_file(fs::path(g.out) / "design_sweep.csv", io::provenance_header(s.prov) + csv);
  if (!g.quiet) std::cout << csv;
  return kOk;
}

int cmd_size(const std::string& model_name, unsigned bits, std::optional<double> sparsity,
             std::optional<std::size_t> seq_len, const Globals& g) {
  auto cfg = io::load_model(model_name);
  if (sparsity) cfg.weight_sparsity = *sparsity;
  if (seq_len) cfg.seq_len = *seq_len;
  cfg = model::validate_config(cfg);
  io::Provenance prov;
  prov.seed = g.seed;
  prov.config_hashes = {{"model", io::fnv1a(io::dump(cfg))}};
  const std::string text = report::footprint_text(cfg, bits);
  io::write_file(fs::path(g.out) / "size.txt", io::provenance_header(prov) + text);
  if (!g.quiet) std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer accelerator simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "seed for weights and tokens")->capture_default_str();
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_flag("-q,--quiet", g.quiet, "no stdout report");

  SimArgs sim_args;
  auto* simulate = app.add_subcommand("simulate", "run one simulation");
  add_sim_options(simulate, sim_args);
  simulate->add_flag("--trace", sim_args.trace, "write per-cycle and schedule CSV traces");
  simulate->add_flag("--compare-schedules", sim_args.compare,
                     "run staggered and equal head priority side by side");

  std::string prof_model = "bert-tiny", prof_hw = "acceltran-edge", prof_dir = "profiles";
  std::optional<std::vector<double>> prof_grid;
  std::optional<std::size_t> prof_seq;
  auto* profile = app.add_subcommand("profile", "measure the tau -> sparsity curve of a model");
  profile->add_option("--model", prof_model, "model preset or JSON path")->capture_default_str();
  profile->add_option("--hw", prof_hw, "hardware preset (number format)")->capture_default_str();
  profile->add_option("--taus", prof_grid, "thresholds to profile (default 16 points in [0, 0.1])")
      ->delimiter(',');
  profile->add_option("--profile-dir", prof_dir, "output directory for <model>.json")
      ->capture_default_str();
  profile->add_option("--seq-len", prof_seq, "override the model's sequence length");

  std::size_t lanes = 4;
  std::string policy = "weight-stationary", df_energy = "energy-14nm-default";
  auto* dfs = app.add_subcommand("dataflow-sweep", "reuse and energy of all 24 loop orders");
  dfs->add_option("--lanes", lanes, "MAC lanes")->capture_default_str()->check(CLI::PositiveNumber);
  dfs->add_option("--policy", policy, "weight-stationary or both-operands")->capture_default_str();
  dfs->add_option("--energy", df_energy, "energy model preset or JSON path")->capture_default_str();

  SimArgs sweep_args;
  std::vector<std::size_t> pes;
  std::vector<double> buffers;
  auto* ds = app.add_subcommand("design-sweep", "stalls over PE count and buffer size");
  add_sim_options(ds, sweep_args);
  ds->add_option("--pes", pes, "PE counts (default 32,64,128,256)")->delimiter(',');
  ds->add_option("--buffers-mib", buffers, "total buffer sizes in MiB (default 10..16)")
      ->delimiter(',');

  std::string size_model = "bert-tiny";
  unsigned bits = 20;
  std::optional<double> sparsity;
  std::optional<std::size_t> size_seq;
  auto* size = app.add_subcommand("size", "memory footprint of a model");
  size->add_option("--model", size_model, "model preset or JSON path")->capture_default_str();
  size->add_option("--bits", bits, "bits per element")->capture_default_str()->check(CLI::PositiveNumber);
  size->add_option("--sparsity", sparsity, "weight sparsity override");
  size->add_option("--seq-len", size_seq, "override the model's sequence length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*simulate) return cmd_simulate(sim_args, g);
    if (*profile) return cmd_profile(prof_model, prof_hw, prof_grid, prof_dir, prof_seq, g);
    if (*dfs) return cmd_dataflow_sweep(lanes, policy, df_energy, g);
    if (*ds) {
      if (pes.empty() != buffers.empty()) {
        if (pes.empty()) pes = sim::default_sweep_pes();
        if (buffers.empty()) {
          for (auto b : sim::default_sweep_buffers()) buffers.push_back(static_cast<double>(b) / (1 << 20));
        }
      }
      return cmd_design_sweep(sweep_args, pes, buffers, g);
    }
    if (*size) return cmd_size(size_model, bits, sparsity, size_seq, g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DeadlockError& e) {
    std::cerr << "simulation deadlock: " << e.what() << "\n";
    return kDeadlock;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
