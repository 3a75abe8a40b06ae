#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "acceltran/error.hpp"
#include "acceltran/tiling.hpp"

using namespace acceltran;
using namespace acceltran::tiling;

namespace {

const numerics::FixedFormat kFmt{4, 16};

numerics::FixedTensor random_tensor(model::Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-7.5, 7.5);
  std::vector<double> v(shape.elements());
  for (auto& x : v) x = dist(rng);
  return numerics::FixedTensor::from_real(shape, v, kFmt);
}

// Replays the assignment trace from the op list and counts lane hits.
std::size_t reuse_oracle(const std::vector<TiledOp>& ops, std::size_t lanes, bool both) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t>;
  std::map<std::size_t, std::pair<Key, Key>> held;
  std::size_t hits = 0;
  for (std::size_t t = 0; t < ops.size(); ++t) {
    const auto& o = ops[t].idx;
    const Key w{o.b, o.i, o.k};
    const Key a{o.b, o.k, o.j};
    auto it = held.find(t % lanes);
    if (it != held.end()) {
      hits += it->second.first == w;
      if (both) hits += it->second.second == a;
    }
    held[t % lanes] = {w, a};
  }
  return hits;
}

Dataflow swap_labels(Dataflow df, char x, char y) {
  for (char& c : df.order) {
    if (c == x) {
      c = y;
    } else if (c == y) {
      c = x;
    }
  }
  return df;
}

}  // namespace

TEST_CASE("dataflow enumeration") {
  const auto all = enumerate_dataflows();
  CHECK(all.size() == 24);
  std::set<std::string> names;
  for (const auto& df : all) names.insert(df.name());
  CHECK(names.size() == 24);
  CHECK(all.front().name() == "[b,i,j,k]");
  CHECK(names.count("[k,i,j,b]") == 1);
  CHECK(Dataflow::parse("kijb").name() == "[k,i,j,b]");
  CHECK(Dataflow::parse("[j,b,k,i]").name() == "[j,b,k,i]");
  CHECK_THROWS_AS(Dataflow::parse("bijj"), ConfigError);
  CHECK_THROWS_AS(Dataflow::parse("bij"), ConfigError);
}

TEST_CASE("tile counts") {
  const TileSpec spec;
  CHECK(tile_matmul({1, 16, 16, 16}, spec, Dataflow{}).size() == 1);
  CHECK(tile_matmul({4, 64, 64, 64}, spec, Dataflow{}).size() == 256);
  CHECK(tile_matmul({3, 17, 33, 5}, spec, Dataflow{}).size() == 3 * 2 * 1 * 3);
  CHECK_THROWS_AS(tile_matmul({0, 1, 1, 1}, spec, Dataflow{}), ShapeError);
  CHECK_THROWS_AS(validate(TileSpec{1, 0, 16}), ConfigError);
}

TEST_CASE("every dataflow covers each output/reduction element once") {
  const MatmulDims dims{3, 20, 35, 17};
  const TileSpec spec{2, 16, 16};
  std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> reference;
  for (const auto& op : tile_matmul(dims, spec, Dataflow{})) {
    reference.insert({op.idx.b, op.idx.i, op.idx.j, op.idx.k});
  }
  for (const auto& df : enumerate_dataflows()) {
    const auto ops = tile_matmul(dims, spec, df);
    std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> seen;
    std::vector<int> cover(dims.macs(), 0);
    for (const auto& op : ops) {
      seen.insert({op.idx.b, op.idx.i, op.idx.j, op.idx.k});
      CHECK(op.is_partial_sum == (op.idx.k > 0));
      for (std::size_t b = op.b0; b < op.b0 + op.eb; ++b)
        for (std::size_t i = op.i0; i < op.i0 + op.ex; ++i)
          for (std::size_t k = op.k0; k < op.k0 + op.ey; ++k)
            for (std::size_t j = op.j0; j < op.j0 + op.ez; ++j)
              cover[((b * dims.x + i) * dims.y + k) * dims.z + j]++;
    }
    CHECK(seen == reference);
    CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("loop order follows the dataflow") {
  const auto ops = tile_matmul({2, 32, 32, 32}, TileSpec{}, Dataflow::parse("kijb"));
  REQUIRE(ops.size() == 16);
  // b varies fastest, k slowest
  CHECK(ops[0].idx == TileIndex{0, 0, 0, 0});
  CHECK(ops[1].idx == TileIndex{1, 0, 0, 0});
  CHECK(ops[2].idx == TileIndex{0, 0, 1, 0});
  CHECK(ops[8].idx == TileIndex{0, 0, 0, 1});
}

TEST_CASE("tiled execution reproduces the untiled product under all dataflows") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t b = 1 + rng() % 3, x = 1 + rng() % 40, y = 1 + rng() % 40, z = 1 + rng() % 40;
    const auto w = random_tensor({b, x, y}, rng);
    const auto a = random_tensor({b, y, z}, rng);
    const auto ref = numerics::mac_reference(w, a);
    for (const auto& df : enumerate_dataflows()) {
      REQUIRE(execute_tiled(w, a, TileSpec{1, 16, 16}, df) == ref);
    }
  }
}

TEST_CASE("reuse counting matches a trace replay") {
  const TileSpec spec;
  CHECK(count_reuse(Dataflow{}, {1, 16, 16, 16}, spec, 4) == 0);
  // one lane, [b,i,j,k] over two j tiles: the single weight tile repeats once
  CHECK(count_reuse(Dataflow{}, {1, 16, 16, 32}, spec, 1) == 1);
  CHECK(count_reuse(Dataflow{}, {1, 16, 16, 32}, spec, 1, ReusePolicy::kBothOperands) == 1);
  CHECK_THROWS_AS(count_reuse(Dataflow{}, {1, 16, 16, 32}, spec, 0), ConfigError);

  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 40; ++trial) {
    const MatmulDims dims{1 + rng() % 4, 1 + rng() % 64, 1 + rng() % 64, 1 + rng() % 64};
    const std::size_t lanes = 1 + rng() % 6;
    for (const auto& df : enumerate_dataflows()) {
      const auto ops = tile_matmul(dims, spec, df);
      CHECK(count_reuse(df, dims, spec, lanes) == reuse_oracle(ops, lanes, false));
      const auto both = count_reuse(df, dims, spec, lanes, ReusePolicy::kBothOperands);
      CHECK(both == reuse_oracle(ops, lanes, true));
      CHECK(both <= 2 * ops.size());
    }
  }
}

TEST_CASE("energy properties") {
  const TileSpec spec;
  const MatmulDims dims{4, 64, 64, 64};
  const double floor = static_cast<double>(dims.macs()) * 0.5;
  for (const auto& df : enumerate_dataflows()) {
    CHECK(dataflow_energy(df, dims, spec, 4, {0.0, 0.5}) == floor);
    CHECK(dataflow_energy(df, dims, spec, 4, {100.0, 0.5}) >= floor);
  }
  // more reuse, less energy
  const auto all = enumerate_dataflows();
  for (const auto& p : all)
    for (const auto& q : all) {
      if (count_reuse(p, dims, spec, 4) > count_reuse(q, dims, spec, 4)) {
        CHECK(dataflow_energy(p, dims, spec, 4, {10, 1}) < dataflow_energy(q, dims, spec, 4, {10, 1}));
      }
    }
  CHECK_THROWS_AS(dataflow_energy(Dataflow{}, dims, spec, 4, {-1, 0}), ConfigError);
}

TEST_CASE("symmetric dataflows give equal reuse on symmetric dims") {
  const TileSpec spec;
  // b and k play mirror roles when their tile counts match
  const MatmulDims dims{4, 64, 64, 64};
  for (const auto& df : enumerate_dataflows()) {
    const Dataflow mirror = swap_labels(df, 'b', 'k');
    CHECK(count_reuse(df, dims, spec, 4) == count_reuse(mirror, dims, spec, 4));
    CHECK(count_reuse(df, dims, spec, 4, ReusePolicy::kBothOperands) ==
          count_reuse(mirror, dims, spec, 4, ReusePolicy::kBothOperands));
  }
  // with both operands counted, i and j mirror each other when X == Z
  for (const auto& df : enumerate_dataflows()) {
    CHECK(count_reuse(df, dims, spec, 4, ReusePolicy::kBothOperands) ==
          count_reuse(swap_labels(df, 'i', 'j'), dims, spec, 4, ReusePolicy::kBothOperands));
  }
}

TEST_CASE("reuse policy parsing") {
  CHECK(parse_reuse_policy("weight-stationary") == ReusePolicy::kWeightStationary);
  CHECK(parse_reuse_policy(to_string(ReusePolicy::kBothOperands)) == ReusePolicy::kBothOperands);
  CHECK_THROWS_AS(parse_reuse_policy("lru"), ConfigError);
}
