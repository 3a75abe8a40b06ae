#include <catch_amalgamated.hpp>

#include <random>

#include "acceltran/arch.hpp"
#include "acceltran/error.hpp"

using namespace acceltran;
using namespace acceltran::arch;

TEST_CASE("presets") {
  const auto edge = validate(acceltran_edge());
  CHECK(edge.pe_count == 64);
  CHECK(edge.lanes_per_pe == 16);
  CHECK(edge.softmax_per_pe == 4);
  CHECK(edge.layernorm_per_pe == 1);
  CHECK(edge.act_buffer_bytes == 4ULL << 20);
  CHECK(edge.wt_buffer_bytes == 8ULL << 20);
  CHECK(edge.mask_buffer_bytes == 1ULL << 20);
  CHECK(edge.batch == 4);
  CHECK(edge.latency_cycles() == 50);
  const auto server = validate(acceltran_server());
  CHECK(server.pe_count == 512);
  CHECK(server.lanes_per_pe == 32);
  CHECK(server.softmax_per_pe == 32);
  CHECK(server.batch == 32);
  CHECK(server.mem_bandwidth_bytes_per_s == 256'000'000'000ULL);
  CHECK(server.latency_cycles() == 10);
  CHECK(acceltran_edge_lp().lp_mode);
  CHECK(find_preset("acceltran-edge-lp").has_value());
  CHECK_FALSE(find_preset("tpu").has_value());

  auto bad = edge;
  bad.multipliers_per_lane = 12;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = edge;
  bad.pe_count = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  auto e = energy_14nm_default();
  e.power_gated_leak_fraction = 1.5;
  CHECK_THROWS_AS(validate(e), ConfigError);
}

TEST_CASE("MAC lane timing") {
  CHECK(adder_tree_depth(16) == 4);
  CHECK(mac_lane_cycles(4096, 16) == 256 + 4 + 1);
  CHECK(mac_lane_cycles(0, 16) == 0);
  CHECK(mac_lane_cycles(2048, 16) == 133);
  CHECK(mac_lane_cycles(1, 1) == 2);
  CHECK_THROWS_AS(mac_lane_cycles(10, 12), ConfigError);
  for (std::uint64_t n = 1; n < 3000; ++n) {
    CHECK(mac_lane_cycles(n, 16) >= mac_lane_cycles(n - 1, 16));
    CHECK(mac_lane_cycles(n, 16) == (n + 15) / 16 + 5);
  }
}

TEST_CASE("DynaTran module is single cycle") {
  CHECK(dynatran_module_cycles(1, 16, 16, 1, 16, 16) == 1);
  CHECK(dynatran_module_cycles(1, 3, 7, 1, 16, 16) == 1);
  CHECK_THROWS_AS(dynatran_module_cycles(2, 16, 16, 1, 16, 16), ShapeError);
  CHECK(256 * energy_14nm_default().dynatran_cmp_pj == Catch::Approx(256 * 0.02));
}

TEST_CASE("softmax and layer-norm timing") {
  CHECK(softmax_cycles(1, 16, 16) == 7);
  CHECK(layernorm_cycles(1, 16, 16) == 6);
  CHECK(softmax_cycles(2, 16, 16) == 14);
  CHECK(softmax_cycles(1, 17, 16) == 3 * 2 + 4);
  for (std::size_t r = 1; r < 20; ++r)
    for (std::size_t c = 1; c < 70; ++c) {
      CHECK(softmax_cycles(2 * r, c, 16) == 2 * softmax_cycles(r, c, 16));
      CHECK(softmax_cycles(r, c + 1, 16) >= softmax_cycles(r, c, 16));
      CHECK(layernorm_cycles(r + 1, c, 16) >= layernorm_cycles(r, c, 16));
    }
}

TEST_CASE("buffer model") {
  const auto e = energy_14nm_default();
  auto c = buffer_model(BufferKind::kActivation, BufferOp::kRead, 64, 32, e);
  CHECK(c.busy_cycles == 2);
  CHECK(c.energy_pj == Catch::Approx(64 * e.buffer_rd_pj_per_byte));
  c = buffer_model(BufferKind::kWeight, BufferOp::kWrite, 0, 32, e);
  CHECK(c.busy_cycles == 0);
  CHECK(c.energy_pj == 0);
  c = buffer_model(BufferKind::kMask, BufferOp::kWrite, 65, 64, e);
  CHECK(c.busy_cycles == 2);
  CHECK(c.energy_pj == Catch::Approx(65 * e.mask_wr_pj_per_byte));
  CHECK(buffer_model(BufferKind::kMask, BufferOp::kEvict, 4096, 64, e).energy_pj == 0);

  Buffer buf(BufferKind::kActivation, 4096);
  CHECK(buf.allocate(2048));
  CHECK(buf.allocate(2048));
  CHECK_FALSE(buf.allocate(1));
  CHECK(buf.used() == 4096);
  buf.release(2048);
  CHECK(buf.free_bytes() == 2048);
  CHECK(buf.allocate(1));
  CHECK(buf.peak() == 4096);
  CHECK_THROWS(buf.release(1'000'000));
}

TEST_CASE("main memory timing") {
  const auto edge = acceltran_edge();
  CHECK(mem_stream_cycles(3657, edge) == 100);
  CHECK(main_mem_cycles(3657, edge) == 150);
  CHECK(main_mem_cycles(0, edge) == 50);
  auto server_bw = edge;
  server_bw.mem_bandwidth_bytes_per_s = 256'000'000'000ULL;
  for (std::uint64_t bytes : {36571ULL * 10, 3657142ULL, 1ULL << 24}) {
    const double ratio = static_cast<double>(mem_stream_cycles(bytes, edge)) /
                         static_cast<double>(mem_stream_cycles(bytes, server_bw));
    CHECK(ratio == Catch::Approx(10.0).epsilon(0.01));
  }
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t b = rng() % 1'000'000;
    CHECK(mem_stream_cycles(b + 1, edge) >= mem_stream_cycles(b, edge));
    const double exact = static_cast<double>(b) * 0.7e9 / 25.6e9;
    CHECK(static_cast<double>(mem_stream_cycles(b, edge)) >= exact);
    CHECK(static_cast<double>(mem_stream_cycles(b, edge)) < exact + 1.0);
  }
}

TEST_CASE("peak throughput") {
  const double server = peak_tops(acceltran_server());
  CHECK(server == Catch::Approx(512.0 * 32 * 16 * 2 * 0.7e9 / 1e12));
  CHECK(std::abs(server - 372.74) / 372.74 < 0.02);
  CHECK(peak_tops(acceltran_edge_lp()) == peak_tops(acceltran_edge()) / 2);
  HardwareConfig tiny = acceltran_edge();
  tiny.pe_count = 1;
  tiny.lanes_per_pe = 1;
  tiny.multipliers_per_lane = 1;
  CHECK(peak_tops(tiny) * 1e12 == Catch::Approx(2 * 0.7e9));
  CHECK(active_ceiling(7, true) == 4);
  CHECK(active_ceiling(8, true) == 4);
  CHECK(active_ceiling(8, false) == 8);
}

TEST_CASE("femtojoule rounding") {
  CHECK(to_fj(1.0) == 1000);
  CHECK(to_fj(0.0125) == 13);
  CHECK(to_fj(0.0) == 0);
}
