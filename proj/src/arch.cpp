#include "acceltran/arch.hpp"

#include <bit>
#include <cmath>

#include "acceltran/error.hpp"

namespace acceltran::arch {

std::string_view to_string(MemKind kind) {
  return kind == MemKind::kLpddr3 ? "lpddr3" : "mono3d-rram";
}

MemKind parse_mem_kind(std::string_view text) {
  if (text == "lpddr3") return MemKind::kLpddr3;
  if (text == "mono3d-rram") return MemKind::kMono3dRram;
  throw ConfigError("unknown memory kind: " + std::string(text));
}

std::uint64_t HardwareConfig::latency_cycles() const {
  if (mem_latency_cycles) return *mem_latency_cycles;
  return mem_kind == MemKind::kLpddr3 ? 50 : 10;
}

bool is_power_of_two(std::size_t v) { return v != 0 && std::has_single_bit(v); }

std::size_t log2_exact(std::size_t v) {
  if (!is_power_of_two(v)) throw ConfigError("value " + std::to_string(v) + " is not a power of two");
  return static_cast<std::size_t>(std::countr_zero(v));
}

HardwareConfig validate(HardwareConfig cfg) {
  auto positive = [](std::uint64_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("hardware field '") + field + "' must be >= 1");
  };
  positive(cfg.pe_count, "pe_count");
  positive(cfg.lanes_per_pe, "lanes_per_pe");
  positive(cfg.softmax_per_pe, "softmax_per_pe");
  positive(cfg.layernorm_per_pe, "layernorm_per_pe");
  positive(cfg.multipliers_per_lane, "multipliers_per_lane");
  positive(cfg.clock_hz, "clock_hz");
  positive(cfg.act_buffer_bytes, "act_buffer_bytes");
  positive(cfg.wt_buffer_bytes, "wt_buffer_bytes");
  positive(cfg.mask_buffer_bytes, "mask_buffer_bytes");
  positive(cfg.mem_bandwidth_bytes_per_s, "mem_bandwidth_bytes_per_s");
  positive(cfg.batch, "batch");
  positive(cfg.port_width_bytes, "port_width_bytes");
  positive(cfg.softmax_passes, "softmax_passes");
  positive(cfg.layernorm_passes, "layernorm_passes");
  log2_exact(cfg.multipliers_per_lane);
  numerics::make_format(cfg.fmt.integer_bits, cfg.fmt.fraction_bits);
  if (cfg.nonlinear_ops_per_module_cycle < 0) throw ConfigError("nonlinear op rate must be >= 0");
  return cfg;
}

HardwareConfig acceltran_edge() {
  HardwareConfig cfg;
  cfg.name = "acceltran-edge";
  return cfg;
}

HardwareConfig acceltran_server() {
  HardwareConfig cfg;
  cfg.name = "acceltran-server";
  cfg.pe_count = 512;
  cfg.lanes_per_pe = 32;
  cfg.softmax_per_pe = 32;
  cfg.layernorm_per_pe = 1;
  cfg.act_buffer_bytes = 32ULL << 20;
  cfg.wt_buffer_bytes = 64ULL << 20;
  cfg.mask_buffer_bytes = 8ULL << 20;
  cfg.mem_bandwidth_bytes_per_s = 256'000'000'000ULL;
  cfg.mem_kind = MemKind::kMono3dRram;
  cfg.batch = 32;
  return cfg;
}

HardwareConfig acceltran_edge_lp() {
  HardwareConfig cfg = acceltran_edge();
  cfg.name = "acceltran-edge-lp";
  cfg.lp_mode = true;
  return cfg;
}

std::optional<HardwareConfig> find_preset(std::string_view name) {
  if (name == "acceltran-edge") return acceltran_edge();
  if (name == "acceltran-server") return acceltran_server();
  if (name == "acceltran-edge-lp") return acceltran_edge_lp();
  return std::nullopt;
}

std::string_view to_string(LeakKind kind) {
  switch (kind) {
    case LeakKind::kMacLane: return "mac_lane";
    case LeakKind::kSoftmax: return "softmax";
    case LeakKind::kLayerNorm: return "layernorm";
    case LeakKind::kDynaTran: return "dynatran";
    case LeakKind::kActBuffer: return "act_buffer";
    case LeakKind::kWtBuffer: return "wt_buffer";
    case LeakKind::kMaskBuffer: return "mask_buffer";
  }
  return "?";
}

EnergyModel validate(EnergyModel model) {
  for (double v : {model.mac_pj, model.buffer_rd_pj_per_byte, model.buffer_wr_pj_per_byte,
                   model.mask_rd_pj_per_byte, model.mask_wr_pj_per_byte, model.mem_pj_per_byte,
                   model.softmax_elem_pj, model.layernorm_elem_pj, model.dynatran_cmp_pj,
                   model.sparsity_elem_pj}) {
    if (!(v >= 0)) throw ConfigError("energy costs must be >= 0");
  }
  for (double v : model.leakage_pj_per_cycle) {
    if (!(v >= 0)) throw ConfigError("leakage costs must be >= 0");
  }
  if (!(model.power_gated_leak_fraction >= 0 && model.power_gated_leak_fraction <= 1)) {
    throw ConfigError("power_gated_leak_fraction must lie in [0, 1]");
  }
  return model;
}

EnergyModel energy_14nm_default() { return EnergyModel{}; }

std::int64_t to_fj(double pj) { return std::llround(pj * 1000.0); }

std::size_t adder_tree_depth(std::size_t multipliers) { return log2_exact(multipliers); }

std::uint64_t mac_lane_cycles(std::uint64_t n_eff, std::size_t multipliers) {
  const std::size_t depth = log2_exact(multipliers);
  if (n_eff == 0) return 0;
  return (n_eff + multipliers - 1) / multipliers + depth + 1;
}

std::uint64_t dynatran_module_cycles(std::size_t tb, std::size_t tx, std::size_t ty,
                                     std::size_t max_b, std::size_t max_x, std::size_t max_y) {
  if (tb > max_b || tx > max_x || ty > max_y) {
    throw ShapeError("tile exceeds the DynaTran comparator array");
  }
  return 1;
}

namespace {

std::uint64_t row_pass_cycles(std::size_t rows, std::size_t cols, std::size_t m, std::size_t passes,
                              std::size_t fixed) {
  if (m == 0) throw ConfigError("multiplier count must be >= 1");
  const std::uint64_t chunks = (cols + m - 1) / m;
  return static_cast<std::uint64_t>(rows) * (chunks * passes + fixed);
}

}  // namespace

std::uint64_t softmax_cycles(std::size_t rows, std::size_t cols, std::size_t multipliers,
                             std::size_t passes, std::size_t fixed) {
  return row_pass_cycles(rows, cols, multipliers, passes, fixed);
}

std::uint64_t layernorm_cycles(std::size_t rows, std::size_t cols, std::size_t multipliers,
                               std::size_t passes, std::size_t fixed) {
  return row_pass_cycles(rows, cols, multipliers, passes, fixed);
}

std::string_view to_string(BufferKind kind) {
  switch (kind) {
    case BufferKind::kActivation: return "activation";
    case BufferKind::kWeight: return "weight";
    case BufferKind::kMask: return "mask";
  }
  return "?";
}

BufferCost buffer_model(BufferKind kind, BufferOp op, std::uint64_t bytes, std::size_t port_width,
                        const EnergyModel& energy) {
  if (port_width == 0) throw ConfigError("port width must be >= 1");
  BufferCost cost;
  if (op == BufferOp::kEvict || bytes == 0) return cost;
  cost.busy_cycles = (bytes + port_width - 1) / port_width;
  const bool mask = kind == BufferKind::kMask;
  const double per_byte = op == BufferOp::kRead
                              ? (mask ? energy.mask_rd_pj_per_byte : energy.buffer_rd_pj_per_byte)
                              : (mask ? energy.mask_wr_pj_per_byte : energy.buffer_wr_pj_per_byte);
  cost.energy_pj = static_cast<double>(bytes) * per_byte;
  return cost;
}

Buffer::Buffer(BufferKind kind, std::uint64_t capacity) : kind_(kind), capacity_(capacity) {}

bool Buffer::allocate(std::uint64_t bytes) {
  if (!fits(bytes)) return false;
  used_ += bytes;
  if (used_ > peak_) peak_ = used_;
  return true;
}

void Buffer::release(std::uint64_t bytes) {
  if (bytes > used_) throw std::logic_error("buffer release exceeds occupancy");
  used_ -= bytes;
}

std::uint64_t mem_stream_cycles(std::uint64_t bytes, const HardwareConfig& cfg) {
  const unsigned __int128 num = static_cast<unsigned __int128>(bytes) * cfg.clock_hz;
  const unsigned __int128 den = cfg.mem_bandwidth_bytes_per_s;
  return static_cast<std::uint64_t>((num + den - 1) / den);
}

std::uint64_t main_mem_cycles(std::uint64_t bytes, const HardwareConfig& cfg) {
  return mem_stream_cycles(bytes, cfg) + cfg.latency_cycles();
}

double peak_tops(const HardwareConfig& cfg) {
  const double clock = static_cast<double>(cfg.clock_hz);
  const double pes = static_cast<double>(cfg.pe_count);
  double ops = pes * static_cast<double>(cfg.lanes_per_pe * cfg.multipliers_per_lane) * 2.0 * clock;
  ops += pes * static_cast<double>(cfg.softmax_per_pe + cfg.layernorm_per_pe) *
         cfg.nonlinear_ops_per_module_cycle * clock;
  if (cfg.lp_mode) ops /= 2.0;
  return ops / 1e12;
}

std::size_t active_ceiling(std::size_t modules, bool lp_mode) {
  return lp_mode ? (modules + 1) / 2 : modules;
}

}  // namespace acceltran::arch
