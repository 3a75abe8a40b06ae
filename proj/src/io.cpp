#include "acceltran/io.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "acceltran/error.hpp"
#include "json.hpp"

namespace acceltran::io {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Pulls typed fields out of a JSON object and complains about anything left over.
class Reader {
 public:
  Reader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j_.is_object()) throw ConfigError(what_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(what_ + "." + key + ": " + e.what());
    }
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(what_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

json parse_text(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

ordered_json model_json(const model::ModelConfig& c) {
  ordered_json j;
  j["name"] = c.name;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["seq_len"] = c.seq_len;
  j["batch"] = c.batch;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["ff_dim"] = c.ff_dim;
  j["weight_sparsity"] = c.weight_sparsity;
  return j;
}

ordered_json hardware_json(const arch::HardwareConfig& h) {
  ordered_json j;
  j["name"] = h.name;
  j["pe_count"] = h.pe_count;
  j["lanes_per_pe"] = h.lanes_per_pe;
  j["softmax_per_pe"] = h.softmax_per_pe;
  j["layernorm_per_pe"] = h.layernorm_per_pe;
  j["multipliers_per_lane"] = h.multipliers_per_lane;
  j["clock_hz"] = h.clock_hz;
  j["integer_bits"] = h.fmt.integer_bits;
  j["fraction_bits"] = h.fmt.fraction_bits;
  j["act_buffer_bytes"] = h.act_buffer_bytes;
  j["wt_buffer_bytes"] = h.wt_buffer_bytes;
  j["mask_buffer_bytes"] = h.mask_buffer_bytes;
  j["mem_bandwidth_bytes_per_s"] = h.mem_bandwidth_bytes_per_s;
  j["mem_kind"] = arch::to_string(h.mem_kind);
  j["batch"] = h.batch;
  j["lp_mode"] = h.lp_mode;
  j["port_width_bytes"] = h.port_width_bytes;
  j["mem_latency_cycles"] = h.mem_latency_cycles ? json(*h.mem_latency_cycles) : json(nullptr);
  j["softmax_passes"] = h.softmax_passes;
  j["layernorm_passes"] = h.layernorm_passes;
  j["nonlinear_fixed_cycles"] = h.nonlinear_fixed_cycles;
  j["nonlinear_ops_per_module_cycle"] = h.nonlinear_ops_per_module_cycle;
  return j;
}

ordered_json energy_json(const arch::EnergyModel& e) {
  ordered_json j;
  j["name"] = e.name;
  j["mac_pj"] = e.mac_pj;
  j["buffer_rd_pj_per_byte"] = e.buffer_rd_pj_per_byte;
  j["buffer_wr_pj_per_byte"] = e.buffer_wr_pj_per_byte;
  j["mask_rd_pj_per_byte"] = e.mask_rd_pj_per_byte;
  j["mask_wr_pj_per_byte"] = e.mask_wr_pj_per_byte;
  j["mem_pj_per_byte"] = e.mem_pj_per_byte;
  j["softmax_elem_pj"] = e.softmax_elem_pj;
  j["layernorm_elem_pj"] = e.layernorm_elem_pj;
  j["dynatran_cmp_pj"] = e.dynatran_cmp_pj;
  j["sparsity_elem_pj"] = e.sparsity_elem_pj;
  ordered_json leak;
  for (std::size_t k = 0; k < arch::kLeakKinds; ++k) {
    leak[std::string(arch::to_string(static_cast<arch::LeakKind>(k)))] = e.leakage_pj_per_cycle[k];
  }
  j["leakage_pj_per_cycle"] = leak;
  j["power_gated_leak_fraction"] = e.power_gated_leak_fraction;
  return j;
}

ordered_json profile_points(const sparsity::SparsityProfile& p) {
  ordered_json pts = ordered_json::array();
  for (const auto& pt : p.points) pts.push_back({{"tau", pt.tau}, {"rho", pt.rho}});
  return pts;
}

ordered_json provenance_json(const Provenance& p) {
  ordered_json j;
  j["tool_version"] = p.tool_version;
  j["seed"] = p.seed;
  ordered_json hashes;
  for (const auto& [label, h] : p.config_hashes) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    hashes[label] = os.str();
  }
  j["config_hashes"] = hashes;
  return j;
}

bool looks_like_path(const std::string& s) {
  return s.find('/') != std::string::npos || s.ends_with(".json");
}

}  // namespace

std::string dump(const model::ModelConfig& cfg) { return model_json(cfg).dump(2) + "\n"; }
std::string dump(const arch::HardwareConfig& hw) { return hardware_json(hw).dump(2) + "\n"; }
std::string dump(const arch::EnergyModel& energy) { return energy_json(energy).dump(2) + "\n"; }

std::string dump(const sparsity::SparsityProfile& profile) {
  ordered_json j;
  j["model"] = profile.model_name;
  j["points"] = profile_points(profile);
  return j.dump(2) + "\n";
}

model::ModelConfig parse_model(std::string_view text) {
  const json j = parse_text(text, "model config");
  model::ModelConfig c;
  Reader r(j, "model config");
  r.get("name", c.name);
  r.get("vocab_size", c.vocab_size);
  r.get("max_seq_len", c.max_seq_len);
  r.get("seq_len", c.seq_len);
  r.get("batch", c.batch);
  r.get("hidden", c.hidden);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  r.get("ff_dim", c.ff_dim);
  r.get("weight_sparsity", c.weight_sparsity);
  r.finish();
  return model::validate_config(c);
}

arch::HardwareConfig parse_hardware(std::string_view text) {
  const json j = parse_text(text, "hardware config");
  arch::HardwareConfig h;
  Reader r(j, "hardware config");
  r.get("name", h.name);
  r.get("pe_count", h.pe_count);
  r.get("lanes_per_pe", h.lanes_per_pe);
  r.get("softmax_per_pe", h.softmax_per_pe);
  r.get("layernorm_per_pe", h.layernorm_per_pe);
  r.get("multipliers_per_lane", h.multipliers_per_lane);
  r.get("clock_hz", h.clock_hz);
  int il = h.fmt.integer_bits, fl = h.fmt.fraction_bits;
  r.get("integer_bits", il);
  r.get("fraction_bits", fl);
  h.fmt = numerics::make_format(il, fl);
  r.get("act_buffer_bytes", h.act_buffer_bytes);
  r.get("wt_buffer_bytes", h.wt_buffer_bytes);
  r.get("mask_buffer_bytes", h.mask_buffer_bytes);
  r.get("mem_bandwidth_bytes_per_s", h.mem_bandwidth_bytes_per_s);
  std::string mem = std::string(arch::to_string(h.mem_kind));
  r.get("mem_kind", mem);
  h.mem_kind = arch::parse_mem_kind(mem);
  r.get("batch", h.batch);
  r.get("lp_mode", h.lp_mode);
  r.get("port_width_bytes", h.port_width_bytes);
  if (const json* lat = r.raw("mem_latency_cycles"); lat && !lat->is_null()) {
    if (!lat->is_number_unsigned()) throw ConfigError("hardware config.mem_latency_cycles: expected an unsigned integer");
    h.mem_latency_cycles = lat->get<std::uint64_t>();
  }
  r.get("softmax_passes", h.softmax_passes);
  r.get("layernorm_passes", h.layernorm_passes);
  r.get("nonlinear_fixed_cycles", h.nonlinear_fixed_cycles);
  r.get("nonlinear_ops_per_module_cycle", h.nonlinear_ops_per_module_cycle);
  r.finish();
  return arch::validate(h);
}

arch::EnergyModel parse_energy(std::string_view text) {
  const json j = parse_text(text, "energy model");
  arch::EnergyModel e;
  Reader r(j, "energy model");
  r.get("name", e.name);
  r.get("mac_pj", e.mac_pj);
  r.get("buffer_rd_pj_per_byte", e.buffer_rd_pj_per_byte);
  r.get("buffer_wr_pj_per_byte", e.buffer_wr_pj_per_byte);
  r.get("mask_rd_pj_per_byte", e.mask_rd_pj_per_byte);
  r.get("mask_wr_pj_per_byte", e.mask_wr_pj_per_byte);
  r.get("mem_pj_per_byte", e.mem_pj_per_byte);
  r.get("softmax_elem_pj", e.softmax_elem_pj);
  r.get("layernorm_elem_pj", e.layernorm_elem_pj);
  r.get("dynatran_cmp_pj", e.dynatran_cmp_pj);
  r.get("sparsity_elem_pj", e.sparsity_elem_pj);
  if (const json* leak = r.raw("leakage_pj_per_cycle")) {
    Reader lr(*leak, "energy model.leakage_pj_per_cycle");
    for (std::size_t k = 0; k < arch::kLeakKinds; ++k) {
      const std::string key(arch::to_string(static_cast<arch::LeakKind>(k)));
      lr.get(key.c_str(), e.leakage_pj_per_cycle[k]);
    }
    lr.finish();
  }
  r.get("power_gated_leak_fraction", e.power_gated_leak_fraction);
  r.finish();
  return arch::validate(e);
}

sparsity::SparsityProfile parse_profile(std::string_view text) {
  const json j = parse_text(text, "sparsity profile");
  sparsity::SparsityProfile p;
  Reader r(j, "sparsity profile");
  r.get("model", p.model_name);
  r.raw("provenance");  // informational
  const json* pts = r.raw("points");
  if (pts == nullptr || !pts->is_array()) throw ConfigError("sparsity profile: 'points' must be an array");
  for (const auto& item : *pts) {
    sparsity::ProfilePoint pt;
    Reader pr(item, "sparsity profile point");
    pr.get("tau", pt.tau);
    pr.get("rho", pt.rho);
    pr.finish();
    p.points.push_back(pt);
  }
  r.finish();
  sparsity::validate_profile(p);
  return p;
}

model::ModelConfig load_model(const std::string& name_or_path) {
  if (!looks_like_path(name_or_path)) {
    if (auto preset = model::find_preset(name_or_path)) return *preset;
    throw ConfigError("unknown model preset '" + name_or_path + "' (presets: bert-tiny, bert-base)");
  }
  return parse_model(read_file(name_or_path));
}

arch::HardwareConfig load_hardware(const std::string& name_or_path) {
  if (!looks_like_path(name_or_path)) {
    if (auto preset = arch::find_preset(name_or_path)) return *preset;
    throw ConfigError("unknown hardware preset '" + name_or_path +
                      "' (presets: acceltran-edge, acceltran-server, acceltran-edge-lp)");
  }
  return parse_hardware(read_file(name_or_path));
}

arch::EnergyModel load_energy(const std::string& name_or_path) {
  if (!looks_like_path(name_or_path)) {
    if (name_or_path == "energy-14nm-default") return arch::energy_14nm_default();
    throw ConfigError("unknown energy model '" + name_or_path + "' (presets: energy-14nm-default)");
  }
  return parse_energy(read_file(name_or_path));
}

sparsity::SparsityProfile load_profile(const std::filesystem::path& path) {
  return parse_profile(read_file(path));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path.string());
  return os.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp, ec);
      throw IoError("error writing " + tmp.string());
    }
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string provenance_header(const Provenance& p, std::string_view prefix) {
  std::ostringstream os;
  os << prefix << "acceltran " << p.tool_version << " seed=" << p.seed << "\n";
  for (const auto& [label, h] : p.config_hashes) {
    os << prefix << label << "=" << std::hex << std::setw(16) << std::setfill('0') << h
       << std::dec << "\n";
  }
  return os.str();
}

std::string metrics_json(const sim::Metrics& m, const Provenance& p) {
  ordered_json j;
  j["provenance"] = provenance_json(p);
  j["model"] = m.model;
  j["hardware"] = m.hardware;
  j["dense"] = m.dense;
  j["tau"] = m.dense ? json(nullptr) : json(m.tau);
  j["total_cycles"] = m.total_cycles;
  j["embedding_load_cycles"] = m.embedding_load_cycles;
  j["throughput_seq_per_s"] = m.throughput_seq_per_s;
  j["avg_power_w"] = m.avg_power_w;
  j["total_energy_pj"] = m.total_energy_pj();
  ordered_json energy;
  for (std::size_t c = 0; c < sim::kEnergyComponents; ++c) {
    energy[std::string(sim::to_string(static_cast<sim::EnergyComponent>(c)))] = m.energy_fj[c];
  }
  j["energy_fj"] = energy;
  ordered_json stalls;
  for (std::size_t s = 0; s < sched::kStallReasons; ++s) {
    stalls[std::string(sched::to_string(static_cast<sched::StallReason>(s)))] = m.stalls[s];
  }
  j["stalls"] = stalls;
  j["compute_stalls"] = m.compute_stalls();
  j["memory_stalls"] = m.memory_stalls();
  j["macs_total"] = m.macs_total;
  j["macs_skipped"] = m.macs_skipped;
  j["dynatran_invocations"] = m.dynatran_invocations;
  j["achieved_activation_sparsity"] = m.achieved_activation_sparsity;
  ordered_json util;
  for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
    util[std::string(sched::to_string(static_cast<sched::ModuleKind>(k)))] = m.avg_utilization[k];
  }
  j["avg_utilization"] = util;
  j["peak_act_buffer_frac"] = m.peak_act_buffer_frac;
  j["peak_wt_buffer_frac"] = m.peak_wt_buffer_frac;
  j["peak_mask_buffer_frac"] = m.peak_mask_buffer_frac;
  j["op_count"] = m.op_count;
  return j.dump(2) + "\n";
}

std::string profile_json(const sparsity::SparsityProfile& profile, const Provenance& p) {
  ordered_json j;
  j["provenance"] = provenance_json(p);
  j["model"] = profile.model_name;
  j["points"] = profile_points(profile);
  return j.dump(2) + "\n";
}

std::string summary_text(const sim::Metrics& m) {
  std::ostringstream os;
  auto row = [&](std::string_view key, const auto& value) {
    os << std::left << std::setw(30) << key << value << "\n";
  };
  row("model", m.model);
  row("hardware", m.hardware);
  if (m.dense) {
    row("mode", "dense");
  } else {
    std::ostringstream t;
    t << "dynatran tau=" << m.tau;
    row("mode", t.str());
  }
  row("total cycles", m.total_cycles);
  row("embedding load cycles", m.embedding_load_cycles);
  row("throughput (seq/s)", m.throughput_seq_per_s);
  row("total energy (uJ)", m.total_energy_pj() / 1e6);
  row("avg power (W)", m.avg_power_w);
  row("compute stalls", m.compute_stalls());
  row("memory stalls", m.memory_stalls());
  row("MACs", m.macs_total);
  row("MACs skipped", m.macs_skipped);
  row("activation sparsity", m.achieved_activation_sparsity);
  row("DynaTran invocations", m.dynatran_invocations);
  for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
    row(std::string("util ") + std::string(sched::to_string(static_cast<sched::ModuleKind>(k))),
        m.avg_utilization[k]);
  }
  row("peak act buffer", m.peak_act_buffer_frac);
  row("peak wt buffer", m.peak_wt_buffer_frac);
  row("peak mask buffer", m.peak_mask_buffer_frac);
  return os.str();
}

}  // namespace acceltran::io
