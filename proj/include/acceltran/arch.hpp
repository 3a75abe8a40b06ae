#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "acceltran/numerics.hpp"

namespace acceltran::arch {

enum class MemKind { kLpddr3, kMono3dRram };

std::string_view to_string(MemKind kind);
MemKind parse_mem_kind(std::string_view text);

struct HardwareConfig {
  std::string name = "custom";
  std::size_t pe_count = 64;
  std::size_t lanes_per_pe = 16;
  std::size_t softmax_per_pe = 4;
  std::size_t layernorm_per_pe = 1;
  std::size_t multipliers_per_lane = 16;
  std::uint64_t clock_hz = 700'000'000;
  numerics::FixedFormat fmt{4, 16};
  std::uint64_t act_buffer_bytes = 4ULL << 20;
  std::uint64_t wt_buffer_bytes = 8ULL << 20;
  std::uint64_t mask_buffer_bytes = 1ULL << 20;
  std::uint64_t mem_bandwidth_bytes_per_s = 25'600'000'000ULL;
  MemKind mem_kind = MemKind::kLpddr3;
  std::size_t batch = 4;
  bool lp_mode = false;

  std::size_t port_width_bytes = 64;
  /// Unset: 50 cycles for LP-DDR3, 10 for monolithic-3D RRAM.
  std::optional<std::uint64_t> mem_latency_cycles;
  std::size_t softmax_passes = 3;
  std::size_t layernorm_passes = 2;
  std::size_t nonlinear_fixed_cycles = 4;
  /// Element ops per softmax/layer-norm module per cycle counted in the peak figure.
  double nonlinear_ops_per_module_cycle = 0.0;

  std::uint64_t latency_cycles() const;
  bool operator==(const HardwareConfig&) const = default;
};

/// Throws ConfigError unless every count is >= 1, buffers are nonzero, M is a power of two.
HardwareConfig validate(HardwareConfig cfg);

HardwareConfig acceltran_edge();
HardwareConfig acceltran_server();
HardwareConfig acceltran_edge_lp();
std::optional<HardwareConfig> find_preset(std::string_view name);

enum class LeakKind : std::size_t {
  kMacLane,
  kSoftmax,
  kLayerNorm,
  kDynaTran,
  kActBuffer,
  kWtBuffer,
  kMaskBuffer,
};
inline constexpr std::size_t kLeakKinds = 7;
std::string_view to_string(LeakKind kind);

/// Per-action energies in pJ. Leakage is pJ per module per cycle.
struct EnergyModel {
  std::string name = "energy-14nm-default";
  double mac_pj = 0.25;
  double buffer_rd_pj_per_byte = 1.0;
  double buffer_wr_pj_per_byte = 1.2;
  double mask_rd_pj_per_byte = 0.4;
  double mask_wr_pj_per_byte = 0.5;
  double mem_pj_per_byte = 40.0;
  double softmax_elem_pj = 3.0;
  double layernorm_elem_pj = 2.0;
  double dynatran_cmp_pj = 0.02;
  double sparsity_elem_pj = 0.01;
  std::array<double, kLeakKinds> leakage_pj_per_cycle{0.05, 0.3, 0.2, 0.02, 20.0, 40.0, 5.0};
  double power_gated_leak_fraction = 0.1;

  bool operator==(const EnergyModel&) const = default;
};

EnergyModel validate(EnergyModel model);
EnergyModel energy_14nm_default();

/// Integer femtojoules; every charge in the simulator is rounded once through this.
std::int64_t to_fj(double pj);

bool is_power_of_two(std::size_t v);
std::size_t log2_exact(std::size_t v);

/// ceil(n_eff/M) + log2(M) + 1, or 0 when nothing is effectual.
std::uint64_t mac_lane_cycles(std::uint64_t n_eff, std::size_t multipliers);
std::size_t adder_tree_depth(std::size_t multipliers);

/// One cycle per invocation; throws ShapeError when the tile exceeds the comparator array.
std::uint64_t dynatran_module_cycles(std::size_t tb, std::size_t tx, std::size_t ty,
                                     std::size_t max_b, std::size_t max_x, std::size_t max_y);

std::uint64_t softmax_cycles(std::size_t rows, std::size_t cols, std::size_t multipliers,
                             std::size_t passes = 3, std::size_t fixed = 4);
std::uint64_t layernorm_cycles(std::size_t rows, std::size_t cols, std::size_t multipliers,
                               std::size_t passes = 2, std::size_t fixed = 4);

enum class BufferKind { kActivation, kWeight, kMask };
enum class BufferOp { kRead, kWrite, kEvict };
std::string_view to_string(BufferKind kind);

struct BufferCost {
  std::uint64_t busy_cycles = 0;
  double energy_pj = 0;
};

/// Port occupancy and energy for moving `bytes` through a buffer port.
BufferCost buffer_model(BufferKind kind, BufferOp op, std::uint64_t bytes, std::size_t port_width,
                        const EnergyModel& energy);

/// Occupancy tracker. Allocation past capacity is refused, not fatal.
class Buffer {
 public:
  Buffer(BufferKind kind, std::uint64_t capacity);

  BufferKind kind() const { return kind_; }
  std::uint64_t capacity() const { return capacity_; }
  std::uint64_t used() const { return used_; }
  std::uint64_t free_bytes() const { return capacity_ - used_; }
  std::uint64_t peak() const { return peak_; }
  bool fits(std::uint64_t bytes) const { return bytes <= free_bytes(); }
  /// Returns false (buffer-full) without changing state when the bytes do not fit.
  bool allocate(std::uint64_t bytes);
  void release(std::uint64_t bytes);

 private:
  BufferKind kind_;
  std::uint64_t capacity_;
  std::uint64_t used_ = 0;
  std::uint64_t peak_ = 0;
};

/// ceil(bytes * clock / bandwidth) streaming cycles, exact integer arithmetic.
std::uint64_t mem_stream_cycles(std::uint64_t bytes, const HardwareConfig& cfg);
/// Streaming cycles plus the fixed access latency.
std::uint64_t main_mem_cycles(std::uint64_t bytes, const HardwareConfig& cfg);

/// MAC term pe*lanes*M*2*clock plus the optional nonlinear term, in TOP/s; halved in LP mode.
double peak_tops(const HardwareConfig& cfg);

/// Modules of one kind allowed to be active at once (half, rounded up, in LP mode).
std::size_t active_ceiling(std::size_t modules, bool lp_mode);

}  // namespace acceltran::arch
