#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acceltran/arch.hpp"
#include "acceltran/model.hpp"
#include "acceltran/sim.hpp"
#include "acceltran/tiling.hpp"

namespace acceltran::report {

struct MatmulScenario {
  std::string name;
  tiling::MatmulDims dims;
};

/// W, A in 4x64x64 / 4x64x64, 4x64x64 / 4x64x128 and 4x128x64 / 4x64x64.
std::vector<MatmulScenario> default_scenarios();

struct DataflowRow {
  std::string scenario;
  tiling::Dataflow dataflow;
  std::size_t reuse = 0;
  double energy_pj = 0;
  bool energy_min = false;  // in the argmin set of its scenario
  bool reuse_max = false;   // in the argmax set of its scenario
};

/// Tile fetch cost is one tile's bytes at the buffer read energy.
tiling::TileCosts tile_costs(const arch::EnergyModel& energy, const tiling::TileSpec& spec,
                             const numerics::FixedFormat& fmt);

/// 24 rows per scenario, in enumeration order.
std::vector<DataflowRow> dataflow_sweep(const std::vector<MatmulScenario>& scenarios,
                                        const tiling::TileSpec& spec, std::size_t lanes,
                                        const tiling::TileCosts& costs,
                                        tiling::ReusePolicy policy);

std::string dataflow_sweep_csv(const std::vector<DataflowRow>& rows);

struct TrendFlags {
  bool pe_ok = true;      // stalls no higher than at the next smaller PE count
  bool buffer_ok = true;  // stalls no higher than at the next smaller buffer
};

/// Per-row monotonicity flags for a full grid sorted by (PEs, buffer).
std::vector<TrendFlags> stall_trends(const std::vector<sim::SweepRow>& rows);

std::string design_sweep_csv(const std::vector<sim::SweepRow>& rows);

std::string footprint_text(const model::ModelConfig& cfg, unsigned bits);

}  // namespace acceltran::report
