#include "acceltran/report.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <sstream>

#include "acceltran/error.hpp"

namespace acceltran::report {

std::vector<MatmulScenario> default_scenarios() {
  return {
      {"a", {4, 64, 64, 64}},
      {"b", {4, 64, 64, 128}},
      {"c", {4, 128, 64, 64}},
  };
}

tiling::TileCosts tile_costs(const arch::EnergyModel& energy, const tiling::TileSpec& spec,
                             const numerics::FixedFormat& fmt) {
  const double bytes = static_cast<double>(spec.tb * spec.tx * spec.ty * fmt.total_bits()) / 8.0;
  return {bytes * energy.buffer_rd_pj_per_byte, energy.mac_pj};
}

std::vector<DataflowRow> dataflow_sweep(const std::vector<MatmulScenario>& scenarios,
                                        const tiling::TileSpec& spec, std::size_t lanes,
                                        const tiling::TileCosts& costs,
                                        tiling::ReusePolicy policy) {
  std::vector<DataflowRow> out;
  const auto dfs = tiling::enumerate_dataflows();
  for (const auto& sc : scenarios) {
    const std::size_t first = out.size();
    for (const auto& df : dfs) {
      DataflowRow row;
      row.scenario = sc.name;
      row.dataflow = df;
      row.reuse = tiling::count_reuse(df, sc.dims, spec, lanes, policy);
      row.energy_pj = tiling::dataflow_energy(df, sc.dims, spec, lanes, costs, policy);
      out.push_back(row);
    }
    auto begin = out.begin() + static_cast<std::ptrdiff_t>(first);
    const double emin =
        std::min_element(begin, out.end(), [](auto& a, auto& b) { return a.energy_pj < b.energy_pj; })
            ->energy_pj;
    const std::size_t rmax =
        std::max_element(begin, out.end(), [](auto& a, auto& b) { return a.reuse < b.reuse; })->reuse;
    for (auto it = begin; it != out.end(); ++it) {
      it->energy_min = it->energy_pj == emin;
      it->reuse_max = it->reuse == rmax;
    }
  }
  return out;
}

std::string dataflow_sweep_csv(const std::vector<DataflowRow>& rows) {
  std::ostringstream os;
  os << "scenario,dataflow,reuse_instances,dynamic_energy_pj,energy_argmin,reuse_argmax\n";
  os << std::setprecision(12);
  for (const auto& r : rows) {
    os << r.scenario << ",\"" << r.dataflow.name() << "\"," << r.reuse << "," << r.energy_pj << ","
       << (r.energy_min ? 1 : 0) << "," << (r.reuse_max ? 1 : 0) << "\n";
  }
  return os.str();
}

std::vector<TrendFlags> stall_trends(const std::vector<sim::SweepRow>& rows) {
  std::map<std::pair<std::size_t, std::uint64_t>, std::uint64_t> stalls;
  std::vector<std::size_t> pes;
  std::vector<std::uint64_t> bufs;
  for (const auto& r : rows) {
    stalls[{r.pe_count, r.buffer_bytes}] = r.compute_stalls + r.memory_stalls;
    pes.push_back(r.pe_count);
    bufs.push_back(r.buffer_bytes);
  }
  std::sort(pes.begin(), pes.end());
  pes.erase(std::unique(pes.begin(), pes.end()), pes.end());
  std::sort(bufs.begin(), bufs.end());
  bufs.erase(std::unique(bufs.begin(), bufs.end()), bufs.end());

  std::vector<TrendFlags> flags;
  for (const auto& r : rows) {
    TrendFlags f;
    const auto s = stalls.at({r.pe_count, r.buffer_bytes});
    auto p = std::lower_bound(pes.begin(), pes.end(), r.pe_count);
    if (p != pes.begin()) {
      auto it = stalls.find({*std::prev(p), r.buffer_bytes});
      if (it != stalls.end()) f.pe_ok = s <= it->second;
    }
    auto b = std::lower_bound(bufs.begin(), bufs.end(), r.buffer_bytes);
    if (b != bufs.begin()) {
      auto it = stalls.find({r.pe_count, *std::prev(b)});
      if (it != stalls.end()) f.buffer_ok = s <= it->second;
    }
    flags.push_back(f);
  }
  return flags;
}

std::string design_sweep_csv(const std::vector<sim::SweepRow>& rows) {
  const auto flags = stall_trends(rows);
  std::ostringstream os;
  os << "pe_count,buffer_bytes,compute_stalls,memory_stalls,total_stalls,total_cycles,"
        "pe_trend_ok,buffer_trend_ok\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << r.pe_count << "," << r.buffer_bytes << "," << r.compute_stalls << "," << r.memory_stalls
       << "," << r.compute_stalls + r.memory_stalls << "," << r.total_cycles << ","
       << (flags[i].pe_ok ? 1 : 0) << "," << (flags[i].buffer_ok ? 1 : 0) << "\n";
  }
  return os.str();
}

std::string footprint_text(const model::ModelConfig& cfg, unsigned bits) {
  const auto f = model::memory_footprint(cfg, bits);
  std::ostringstream os;
  os << "model " << cfg.name << ": seq_len=" << cfg.seq_len << " batch=" << cfg.batch
     << " bits=" << bits << " weight_sparsity=" << cfg.weight_sparsity << "\n";
  os << "assumes: weight bytes scaled by (1 - weight_sparsity), activations dense, one mask bit per weight and activation element\n";
  os << std::fixed << std::setprecision(3);
  auto row = [&](std::string_view k, double bytes) {
    os << std::left << std::setw(14) << k << std::right << std::setw(14) << bytes / (1 << 20)
       << " MiB  (" << std::setprecision(0) << bytes << " B)" << std::setprecision(3) << "\n";
  };
  row("embeddings", f.embeddings_bytes);
  row("weights", f.weights_bytes);
  row("activations", f.activations_bytes);
  row("masks", f.mask_bytes);
  row("total", f.total_bytes);
  return os.str();
}

}  // namespace acceltran::report
