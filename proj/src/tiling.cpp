#include "acceltran/tiling.hpp"

#include <algorithm>
#include <optional>

#include "acceltran/error.hpp"

namespace acceltran::tiling {

std::string Dataflow::name() const {
  std::string s = "[";
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) s += ',';
    s += order[i];
  }
  return s + "]";
}

Dataflow Dataflow::parse(std::string_view text) {
  std::string letters;
  for (char c : text) {
    if (c == '[' || c == ']' || c == ',' || c == ' ') continue;
    letters += c;
  }
  std::string sorted = letters;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != "bijk") throw ConfigError("dataflow must be a permutation of b,i,j,k: " + std::string(text));
  Dataflow df;
  std::copy(letters.begin(), letters.end(), df.order.begin());
  return df;
}

std::vector<Dataflow> enumerate_dataflows() {
  std::vector<Dataflow> all;
  std::array<char, 4> order{'b', 'i', 'j', 'k'};
  do {
    all.push_back(Dataflow{order});
  } while (std::next_permutation(order.begin(), order.end()));
  return all;
}

void validate(const TileSpec& spec) {
  if (spec.tb == 0 || spec.tx == 0 || spec.ty == 0) throw ConfigError("tile edges must be >= 1");
}

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void validate(const MatmulDims& dims) {
  if (dims.batch == 0 || dims.x == 0 || dims.y == 0 || dims.z == 0) {
    throw ShapeError("matmul dimensions must be >= 1");
  }
}

template <typename Fn>
void walk(const MatmulDims& dims, const TileSpec& spec, const Dataflow& df, Fn&& fn) {
  const TileGrid g = tile_grid(dims, spec);
  auto bound = [&](char c) {
    switch (c) {
      case 'b': return g.nb;
      case 'i': return g.ni;
      case 'j': return g.nj;
      default: return g.nk;
    }
  };
  std::array<std::size_t, 4> n{};
  for (std::size_t d = 0; d < 4; ++d) n[d] = bound(df.order[d]);
  std::array<std::size_t, 4> c{};
  for (c[0] = 0; c[0] < n[0]; ++c[0])
    for (c[1] = 0; c[1] < n[1]; ++c[1])
      for (c[2] = 0; c[2] < n[2]; ++c[2])
        for (c[3] = 0; c[3] < n[3]; ++c[3]) {
          TileIndex idx;
          for (std::size_t d = 0; d < 4; ++d) {
            switch (df.order[d]) {
              case 'b': idx.b = c[d]; break;
              case 'i': idx.i = c[d]; break;
              case 'j': idx.j = c[d]; break;
              default: idx.k = c[d]; break;
            }
          }
          fn(idx);
        }
}

}  // namespace

TileGrid tile_grid(const MatmulDims& dims, const TileSpec& spec) {
  validate(spec);
  validate(dims);
  return {ceil_div(dims.batch, spec.tb), ceil_div(dims.x, spec.tx), ceil_div(dims.z, spec.ty),
          ceil_div(dims.y, spec.tk())};
}

std::vector<TiledOp> tile_matmul(const MatmulDims& dims, const TileSpec& spec, const Dataflow& df,
                                 model::NodeId parent) {
  std::vector<TiledOp> ops;
  ops.reserve(tile_grid(dims, spec).count());
  walk(dims, spec, df, [&](const TileIndex& idx) {
    TiledOp op;
    op.parent = parent;
    op.idx = idx;
    op.b0 = idx.b * spec.tb;
    op.i0 = idx.i * spec.tx;
    op.j0 = idx.j * spec.ty;
    op.k0 = idx.k * spec.tk();
    op.eb = std::min(spec.tb, dims.batch - op.b0);
    op.ex = std::min(spec.tx, dims.x - op.i0);
    op.ez = std::min(spec.ty, dims.z - op.j0);
    op.ey = std::min(spec.tk(), dims.y - op.k0);
    op.is_partial_sum = idx.k > 0;
    ops.push_back(op);
  });
  return ops;
}

numerics::FixedTensor execute_tiled(const numerics::FixedTensor& w, const numerics::FixedTensor& a,
                                    const TileSpec& spec, const Dataflow& df) {
  if (w.shape.batch != a.shape.batch || w.shape.cols != a.shape.rows) {
    throw ShapeError("tiled matmul operand shapes disagree");
  }
  const MatmulDims dims{w.shape.batch, w.shape.rows, w.shape.cols, a.shape.cols};
  const TileGrid g = tile_grid(dims, spec);
  std::vector<numerics::WideAcc> acc(dims.batch * dims.x * dims.z, 0);
  std::vector<std::size_t> k_done(g.nb * g.ni * g.nj, 0);
  numerics::FixedTensor out = numerics::FixedTensor::zeros({dims.batch, dims.x, dims.z}, w.fmt);
  for (const TiledOp& op : tile_matmul(dims, spec, df)) {
    for (std::size_t b = op.b0; b < op.b0 + op.eb; ++b)
      for (std::size_t i = op.i0; i < op.i0 + op.ex; ++i)
        for (std::size_t j = op.j0; j < op.j0 + op.ez; ++j) {
          numerics::WideAcc& cell = acc[(b * dims.x + i) * dims.z + j];
          for (std::size_t k = op.k0; k < op.k0 + op.ey; ++k) {
            cell += static_cast<numerics::WideAcc>(w.at(b, i, k)) * a.at(b, k, j);
          }
        }
    const std::size_t key = (op.idx.b * g.ni + op.idx.i) * g.nj + op.idx.j;
    if (++k_done[key] == g.nk) {
      for (std::size_t b = op.b0; b < op.b0 + op.eb; ++b)
        for (std::size_t i = op.i0; i < op.i0 + op.ex; ++i)
          for (std::size_t j = op.j0; j < op.j0 + op.ez; ++j) {
            out.at(b, i, j) = numerics::round_accumulator(acc[(b * dims.x + i) * dims.z + j], w.fmt);
          }
    }
  }
  return out;
}

std::string_view to_string(ReusePolicy policy) {
  return policy == ReusePolicy::kWeightStationary ? "weight-stationary" : "both-operands";
}

ReusePolicy parse_reuse_policy(std::string_view text) {
  if (text == "weight-stationary") return ReusePolicy::kWeightStationary;
  if (text == "both-operands") return ReusePolicy::kBothOperands;
  throw ConfigError("unknown reuse policy: " + std::string(text));
}

std::size_t count_reuse(const Dataflow& df, const MatmulDims& dims, const TileSpec& spec,
                        std::size_t lanes, ReusePolicy policy) {
  if (lanes == 0) throw ConfigError("lane count must be >= 1");
  struct Held {
    std::optional<std::array<std::size_t, 3>> w;
    std::optional<std::array<std::size_t, 3>> a;
  };
  std::vector<Held> held(lanes);
  std::size_t reuse = 0;
  std::size_t t = 0;
  walk(dims, spec, df, [&](const TileIndex& idx) {
    Held& lane = held[t++ % lanes];
    const std::array<std::size_t, 3> w{idx.b, idx.i, idx.k};
    const std::array<std::size_t, 3> a{idx.b, idx.k, idx.j};
    if (lane.w == w) ++reuse;
    if (policy == ReusePolicy::kBothOperands && lane.a == a) ++reuse;
    lane.w = w;
    lane.a = a;
  });
  return reuse;
}

double dataflow_energy(const Dataflow& df, const MatmulDims& dims, const TileSpec& spec,
                       std::size_t lanes, const TileCosts& costs, ReusePolicy policy) {
  if (costs.fetch_pj_per_tile < 0 || costs.mac_pj < 0) throw ConfigError("costs must be >= 0");
  const double fetches = 2.0 * static_cast<double>(tile_grid(dims, spec).count());
  const double reuse = static_cast<double>(count_reuse(df, dims, spec, lanes, policy));
  return (fetches - reuse) * costs.fetch_pj_per_tile + static_cast<double>(dims.macs()) * costs.mac_pj;
}

}  // namespace acceltran::tiling
