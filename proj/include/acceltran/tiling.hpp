#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "acceltran/model.hpp"
#include "acceltran/numerics.hpp"

namespace acceltran::tiling {

/// Loop order of the tiled matmul W[b,i,k] x A[b,k,j], outermost first.
struct Dataflow {
  std::array<char, 4> order{'b', 'i', 'j', 'k'};

  /// "[b,i,j,k]"
  std::string name() const;
  /// Accepts "bijk" or "[b,i,j,k]"; throws ConfigError otherwise.
  static Dataflow parse(std::string_view text);
  bool operator==(const Dataflow&) const = default;
};

/// All 24 loop orders, lexicographic starting at [b,i,j,k].
std::vector<Dataflow> enumerate_dataflows();

/// Tile edges along batch, rows and columns; the reduction edge equals ty.
struct TileSpec {
  std::size_t tb = 1;
  std::size_t tx = 16;
  std::size_t ty = 16;

  std::size_t tk() const { return ty; }
  bool operator==(const TileSpec&) const = default;
};

void validate(const TileSpec& spec);

/// W is B x X x Y, A is B x Y x Z.
struct MatmulDims {
  std::size_t batch = 1;
  std::size_t x = 1;
  std::size_t y = 1;
  std::size_t z = 1;

  std::size_t macs() const { return batch * x * y * z; }
  bool operator==(const MatmulDims&) const = default;
};

struct TileGrid {
  std::size_t nb = 0, ni = 0, nj = 0, nk = 0;
  std::size_t count() const { return nb * ni * nj * nk; }
};

TileGrid tile_grid(const MatmulDims& dims, const TileSpec& spec);

struct TileIndex {
  std::size_t b = 0, i = 0, j = 0, k = 0;
  bool operator==(const TileIndex&) const = default;
  auto operator<=>(const TileIndex&) const = default;
};

/// One tile-level multiply. Extents are the real (unpadded) sizes of a ragged edge tile.
struct TiledOp {
  model::NodeId parent = 0;
  TileIndex idx;
  std::size_t b0 = 0, i0 = 0, j0 = 0, k0 = 0;  // element offsets
  std::size_t eb = 0, ex = 0, ey = 0, ez = 0;  // extents along b, x (rows), y (reduction), z (cols)
  bool is_partial_sum = false;                  // k > 0: accumulates onto an earlier partial

  std::size_t macs() const { return eb * ex * ey * ez; }
};

std::vector<TiledOp> tile_matmul(const MatmulDims& dims, const TileSpec& spec, const Dataflow& df,
                                 model::NodeId parent = 0);

/// Executes the tiled loop nest in `df` order with exact partial sums, rounding each
/// output element once after its last k-tile.
numerics::FixedTensor execute_tiled(const numerics::FixedTensor& w, const numerics::FixedTensor& a,
                                    const TileSpec& spec, const Dataflow& df);

/// How lanes are credited with reuse. Tiles go to lanes round-robin in loop order and each
/// lane keeps the operand tiles of its previous assignment.
enum class ReusePolicy {
  kWeightStationary,  // only a repeated weight tile counts
  kBothOperands,      // a repeated weight or activation tile counts
};

std::string_view to_string(ReusePolicy policy);
ReusePolicy parse_reuse_policy(std::string_view text);

std::size_t count_reuse(const Dataflow& df, const MatmulDims& dims, const TileSpec& spec,
                        std::size_t lanes, ReusePolicy policy = ReusePolicy::kWeightStationary);

struct TileCosts {
  double fetch_pj_per_tile = 0;
  double mac_pj = 0;
};

/// (operand tile fetches - reuse instances) * fetch cost + MACs * MAC cost.
double dataflow_energy(const Dataflow& df, const MatmulDims& dims, const TileSpec& spec,
                       std::size_t lanes, const TileCosts& costs,
                       ReusePolicy policy = ReusePolicy::kWeightStationary);

}  // namespace acceltran::tiling
