#include <catch_amalgamated.hpp>

#include <filesystem>

#include "acceltran/error.hpp"
#include "acceltran/io.hpp"
#include "acceltran/report.hpp"
#include "json.hpp"

using namespace acceltran;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("acceltran_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("configs round-trip through JSON") {
  for (const auto& hw : {arch::acceltran_edge(), arch::acceltran_server(), arch::acceltran_edge_lp()}) {
    CHECK(io::parse_hardware(io::dump(hw)) == hw);
  }
  auto hw = arch::acceltran_edge();
  hw.mem_latency_cycles = 7;
  CHECK(io::parse_hardware(io::dump(hw)) == hw);
  for (const auto& m : {model::bert_tiny(), model::bert_base()}) CHECK(io::parse_model(io::dump(m)) == m);
  CHECK(io::parse_energy(io::dump(arch::energy_14nm_default())) == arch::energy_14nm_default());

  sparsity::SparsityProfile p{"bert-tiny", {{0.0, 0.1}, {0.05, 0.3}}};
  CHECK(io::parse_profile(io::dump(p)) == p);
  CHECK(io::parse_profile(io::profile_json(p, {})) == p);
}

TEST_CASE("bundled config files match the presets") {
  const fs::path dir = ACCELTRAN_CONFIG_DIR;
  CHECK(io::load_hardware((dir / "acceltran-edge.json").string()) == arch::acceltran_edge());
  CHECK(io::load_hardware((dir / "acceltran-server.json").string()) == arch::acceltran_server());
  CHECK(io::load_hardware((dir / "acceltran-edge-lp.json").string()) == arch::acceltran_edge_lp());
  CHECK(io::load_energy((dir / "energy-14nm-default.json").string()) == arch::energy_14nm_default());
  CHECK(io::load_model((dir / "bert-tiny.json").string()) == model::bert_tiny());
  CHECK(io::load_model((dir / "bert-base.json").string()) == model::bert_base());
}

TEST_CASE("missing keys take defaults, bad input is rejected") {
  const auto m = io::parse_model(R"({"hidden": 64, "heads": 4, "ff_dim": 256})");
  CHECK(m.hidden == 64);
  CHECK(m.layers == model::ModelConfig{}.layers);

  CHECK_THROWS_AS(io::parse_model(R"({"hiden": 64})"), ConfigError);
  CHECK_THROWS_AS(io::parse_model(R"({"hidden": "wide"})"), ConfigError);
  CHECK_THROWS_AS(io::parse_model("{"), ConfigError);
  CHECK_THROWS_AS(io::parse_model("[]"), ConfigError);
  CHECK_THROWS_AS(io::parse_model(R"({"hidden": 100, "heads": 3})"), ConfigError);
  CHECK_THROWS_AS(io::parse_hardware(R"({"multipliers_per_lane": 12})"), ConfigError);
  CHECK_THROWS_AS(io::parse_hardware(R"({"mem_kind": "sram"})"), ConfigError);
  CHECK_THROWS_AS(io::parse_energy(R"({"leakage_pj_per_cycle": {"alu": 1}})"), ConfigError);
  CHECK_THROWS_AS(io::parse_profile(R"({"model": "x"})"), ConfigError);
  CHECK_THROWS_AS(io::parse_profile(R"({"model": "x", "points": [{"tau": 0.1, "rho": 0.2}, {"tau": 0.0, "rho": 0.3}]})"),
                  ConfigError);
}

TEST_CASE("presets by name") {
  CHECK(io::load_model("bert-base") == model::bert_base());
  CHECK(io::load_hardware("acceltran-server") == arch::acceltran_server());
  CHECK_THROWS_AS(io::load_model("gpt"), ConfigError);
  CHECK_THROWS_AS(io::load_hardware("tpu"), ConfigError);
  CHECK_THROWS_AS(io::load_energy("7nm"), ConfigError);
  CHECK_THROWS_AS(io::load_model("/nonexistent/model.json"), IoError);
}

TEST_CASE("write_file replaces atomically") {
  const auto dir = scratch_dir("write");
  const auto path = dir / "sub" / "a.txt";
  io::write_file(path, "one");
  CHECK(io::read_file(path) == "one");
  io::write_file(path, "two");
  CHECK(io::read_file(path) == "two");
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "sub")) ++n;
  CHECK(n == 1);
  CHECK_THROWS_AS(io::read_file(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("FNV-1a reference values") {
  CHECK(io::fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(io::fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(io::fnv1a("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("provenance goes into every output") {
  io::Provenance p;
  p.seed = 7;
  p.config_hashes = {{"model", 0x1234}};
  const auto h = io::provenance_header(p);
  CHECK(h == "# acceltran 0.1.0 seed=7\n# model=0000000000001234\n");

  sim::Metrics m;
  m.model = "bert-tiny";
  m.total_cycles = 99;
  const auto j = nlohmann::json::parse(io::metrics_json(m, p));
  CHECK(j["provenance"]["seed"] == 7);
  CHECK(j["provenance"]["config_hashes"]["model"] == "0000000000001234");
  CHECK(j["total_cycles"] == 99);
  CHECK(j["tau"].is_null());
  CHECK(io::summary_text(m).find("dense") != std::string::npos);
}

TEST_CASE("dataflow sweep rows") {
  const tiling::TileSpec spec;
  const auto costs = report::tile_costs(arch::energy_14nm_default(), spec, numerics::FixedFormat{});
  CHECK(costs.fetch_pj_per_tile == Catch::Approx(640.0));
  const auto rows = report::dataflow_sweep(report::default_scenarios(), spec, 4, costs,
                                           tiling::ReusePolicy::kWeightStationary);
  REQUIRE(rows.size() == 72);
  for (const auto& sc : {"a", "b", "c"}) {
    std::size_t n = 0, mins = 0;
    for (const auto& r : rows) {
      if (r.scenario != sc) continue;
      ++n;
      mins += r.energy_min;
    }
    CHECK(n == 24);
    CHECK(mins >= 1);
  }
  const auto csv = report::dataflow_sweep_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 73);
  CHECK(csv == report::dataflow_sweep_csv(rows));
}

TEST_CASE("stall trend flags") {
  std::vector<sim::SweepRow> rows = {
      {32, 10, 100, 50, 0},
      {32, 20, 90, 50, 0},
      {64, 10, 80, 10, 0},
      {64, 20, 95, 10, 0},
  };
  const auto f = report::stall_trends(rows);
  REQUIRE(f.size() == 4);
  CHECK((f[0].pe_ok && f[0].buffer_ok));
  CHECK((f[1].pe_ok && f[1].buffer_ok));
  CHECK((f[2].pe_ok && f[2].buffer_ok));
  CHECK(f[3].pe_ok);          // 105 <= 140
  CHECK_FALSE(f[3].buffer_ok);  // 105 > 90
}

TEST_CASE("footprint report") {
  auto cfg = model::bert_tiny();
  const auto text = report::footprint_text(cfg, 20);
  for (const char* k : {"embeddings", "weights", "activations", "masks", "total"}) {
    CHECK(text.find(k) != std::string::npos);
  }
}
