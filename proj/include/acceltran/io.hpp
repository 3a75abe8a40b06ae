#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "acceltran/arch.hpp"
#include "acceltran/model.hpp"
#include "acceltran/sim.hpp"
#include "acceltran/sparsity.hpp"

namespace acceltran::io {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Canonical JSON text; parse_* reject unknown keys and fill missing ones from defaults.
std::string dump(const model::ModelConfig& cfg);
std::string dump(const arch::HardwareConfig& hw);
std::string dump(const arch::EnergyModel& energy);
std::string dump(const sparsity::SparsityProfile& profile);

model::ModelConfig parse_model(std::string_view text);
arch::HardwareConfig parse_hardware(std::string_view text);
arch::EnergyModel parse_energy(std::string_view text);
sparsity::SparsityProfile parse_profile(std::string_view text);

/// A preset name or a path to a JSON file.
model::ModelConfig load_model(const std::string& name_or_path);
arch::HardwareConfig load_hardware(const std::string& name_or_path);
arch::EnergyModel load_energy(const std::string& name_or_path);
sparsity::SparsityProfile load_profile(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file(const std::filesystem::path& path, std::string_view content);

std::uint64_t fnv1a(std::string_view text);

struct Provenance {
  std::string tool_version{kToolVersion};
  std::uint64_t seed = 42;
  std::vector<std::pair<std::string, std::uint64_t>> config_hashes;  // (label, fnv1a of dump)
};

/// "# acceltran 0.1.0 seed=42 model=... hw=..." line set, each prefixed by `prefix`.
std::string provenance_header(const Provenance& p, std::string_view prefix = "# ");

std::string metrics_json(const sim::Metrics& m, const Provenance& p);
std::string profile_json(const sparsity::SparsityProfile& profile, const Provenance& p);
std::string summary_text(const sim::Metrics& m);

}  // namespace acceltran::io
