#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "acceltran/arch.hpp"
#include "acceltran/model.hpp"
#include "acceltran/numerics.hpp"
#include "acceltran/sched.hpp"
#include "acceltran/sparsity.hpp"
#include "acceltran/tiling.hpp"

namespace acceltran::sim {

struct SimOptions {
  std::optional<double> tau;         // fixed DynaTran threshold
  std::optional<double> rho_target;  // looked up in `profile`
  std::optional<sparsity::SparsityProfile> profile;
  bool stagger = true;
  std::uint64_t seed = 42;
  bool trace = false;
  tiling::Dataflow dataflow;
  tiling::TileSpec tile_spec;
  std::uint64_t max_cycles = 4'000'000'000ULL;

  /// Timing from effectual MACs; off charges every padded tile product.
  bool sparsity_aware = true;
  /// Run matmul tiles through compress + pair filter instead of the dense loop.
  bool compressed_datapath = false;
  bool prune_weights = false;
  bool prune_matmul_activations = true;
  bool prune_softmax_input = true;
  bool prune_layernorm_input = true;
};

/// Throws ConfigError on conflicting or incomplete settings.
void validate(const SimOptions& opts);

enum class EnergyComponent : std::size_t {
  kMac,
  kActBuffer,
  kWtBuffer,
  kMaskBuffer,
  kMainMemory,
  kSoftmax,
  kLayerNorm,
  kDynaTran,
  kSparsity,
  kLeakage,
};
inline constexpr std::size_t kEnergyComponents = 10;
std::string_view to_string(EnergyComponent c);

struct Metrics {
  std::string model;
  std::string hardware;
  std::uint64_t total_cycles = 0;
  std::uint64_t embedding_load_cycles = 0;  // completion of the one-time embedding load
  std::array<std::uint64_t, sched::kStallReasons> stalls{};
  std::array<std::int64_t, kEnergyComponents> energy_fj{};
  std::uint64_t macs_total = 0;
  std::uint64_t macs_skipped = 0;
  std::uint64_t dynatran_invocations = 0;
  double tau = 0;
  bool dense = true;
  double achieved_activation_sparsity = 0;
  double throughput_seq_per_s = 0;
  double avg_power_w = 0;
  std::array<double, sched::kModuleKinds> avg_utilization{};
  double peak_act_buffer_frac = 0;
  double peak_wt_buffer_frac = 0;
  double peak_mask_buffer_frac = 0;
  std::size_t op_count = 0;

  std::uint64_t compute_stalls() const;
  std::uint64_t memory_stalls() const;
  std::int64_t total_energy_fj() const;
  double total_energy_pj() const { return static_cast<double>(total_energy_fj()) / 1000.0; }
  double energy_pj(EnergyComponent c) const;
  bool operator==(const Metrics&) const = default;
};

/// Interval of constant activity between two consecutive events.
struct UtilInterval {
  std::uint64_t start = 0;
  std::uint64_t end = 0;
  std::array<std::uint32_t, sched::kModuleKinds> active{};
  std::uint64_t act_used = 0;
  std::uint64_t wt_used = 0;
  std::uint64_t mask_used = 0;
  bool operator==(const UtilInterval&) const = default;
};

struct DynaTranEvent {
  std::uint32_t pe = 0;
  std::uint64_t start = 0;
  std::uint64_t end = 0;
  sched::OpId op = 0;
  bool operator==(const DynaTranEvent&) const = default;
};

enum class EventKind { kIssue, kComplete, kStall, kEvict };

struct ScheduleEvent {
  std::uint64_t cycle = 0;
  sched::OpId op = 0;  // tile id for evictions
  EventKind kind = EventKind::kIssue;
  sched::StallReason reason = sched::StallReason::kComputeNoModule;
  bool operator==(const ScheduleEvent&) const = default;
};

struct OpRecord {
  std::uint64_t eligible = 0;
  std::uint64_t issue = 0;
  std::uint64_t end = 0;
  std::uint32_t module = 0;  // module index, PE for stores, 0 for loads
  std::int64_t energy_fj = 0;
  bool operator==(const OpRecord&) const = default;
};

struct SimResult {
  Metrics metrics;
  numerics::FixedTensor output;
  std::vector<OpRecord> ops;
  std::int64_t leakage_fj = 0;
  std::vector<UtilInterval> util;          // trace only
  std::vector<DynaTranEvent> dynatran;     // trace only
  std::vector<ScheduleEvent> schedule;     // trace only
  std::array<std::size_t, sched::kModuleKinds> module_counts{};
  std::array<std::size_t, sched::kModuleKinds> module_ceilings{};
  std::uint64_t act_capacity = 0, wt_capacity = 0, mask_capacity = 0;
  std::uint64_t clock_hz = 0;
  std::size_t pe_count = 0;
};

/// The DynaTran threshold a run will use (unset in dense mode).
std::optional<double> resolve_tau(const SimOptions& opts);
sparsity::PruneSettings prune_settings(const SimOptions& opts);

SimResult run(const model::ModelConfig& cfg, const arch::HardwareConfig& hw,
              const arch::EnergyModel& energy, const SimOptions& opts);

struct ScheduleComparison {
  SimResult staggered;
  SimResult equal;
};

ScheduleComparison compare_schedules(const model::ModelConfig& cfg, const arch::HardwareConfig& hw,
                                     const arch::EnergyModel& energy, SimOptions opts);

/// Per-cycle CSV (cycle, mac_util, softmax_util, layernorm_util, act_buf_frac, wt_buf_frac,
/// mask_buf_frac, power_w). Throws ConfigError when the run was not traced.
std::string utilization_csv(const SimResult& result, const arch::EnergyModel& energy);
/// (cycle, op, event, detail) rows in time order.
std::string schedule_csv(const SimResult& result);

struct SweepRow {
  std::size_t pe_count = 0;
  std::uint64_t buffer_bytes = 0;  // act + wt + mask
  std::uint64_t compute_stalls = 0;
  std::uint64_t memory_stalls = 0;
  std::uint64_t total_cycles = 0;
  bool operator==(const SweepRow&) const = default;
};

/// Buffer sizes split 4:8:1 between activation, weight and mask buffers.
arch::HardwareConfig with_buffer_total(arch::HardwareConfig hw, std::uint64_t total_bytes);

/// One run per (PE count, total buffer) point, concurrently; rows sorted by (PEs, buffer).
std::vector<SweepRow> design_sweep(const model::ModelConfig& cfg, const arch::HardwareConfig& base,
                                   const arch::EnergyModel& energy, const SimOptions& opts,
                                   const std::vector<std::size_t>& pe_list,
                                   const std::vector<std::uint64_t>& buffer_totals);

std::vector<std::size_t> default_sweep_pes();
std::vector<std::uint64_t> default_sweep_buffers();

std::string design_sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace acceltran::sim
