#include "acceltran/sparsity.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "acceltran/error.hpp"

namespace acceltran::sparsity {

Mask::Mask(model::Shape shape)
    : shape_(shape), size_(shape.elements()), words_((shape.elements() + 63) / 64, 0) {}

void Mask::set(std::size_t i, bool on) {
  const std::uint64_t bit = std::uint64_t{1} << (i & 63);
  if (on) {
    words_[i >> 6] |= bit;
  } else {
    words_[i >> 6] &= ~bit;
  }
}

std::size_t Mask::popcount() const {
  std::size_t n = 0;
  for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

void Mask::check_compatible(const Mask& other) const {
  if (size_ != other.size_) throw ShapeError("mask sizes differ");
}

Mask Mask::operator&(const Mask& other) const {
  check_compatible(other);
  Mask out = *this;
  for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] &= other.words_[i];
  return out;
}

Mask Mask::operator^(const Mask& other) const {
  check_compatible(other);
  Mask out = *this;
  for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] ^= other.words_[i];
  return out;
}

std::string Mask::to_string() const {
  std::string s(size_, '0');
  for (std::size_t i = 0; i < size_; ++i) {
    if (test(i)) s[i] = '1';
  }
  return s;
}

Mask nonzero_mask(const FixedTensor& t) {
  Mask m(t.shape);
  for (std::size_t i = 0; i < t.raw.size(); ++i) {
    if (t.raw[i] != 0) m.set(i);
  }
  return m;
}

Raw threshold_raw(double tau, FixedFormat fmt) {
  if (!(tau >= 0)) throw ConfigError("pruning threshold must be >= 0");
  return numerics::quantize(tau, fmt);
}

std::size_t dynatran_prune_inplace(FixedTensor& tile, Raw tau_raw) {
  std::size_t zeroed = 0;
  for (Raw& v : tile.raw) {
    // widen before negating so the most negative raw value is safe
    const std::int64_t mag = std::abs(static_cast<std::int64_t>(v));
    if (v != 0 && mag < tau_raw) {
      v = 0;
      ++zeroed;
    }
  }
  return zeroed;
}

Pruned dynatran_prune(const FixedTensor& tile, double tau) {
  Pruned out{tile, {}};
  dynatran_prune_inplace(out.tensor, threshold_raw(tau, tile.fmt));
  out.mask = nonzero_mask(out.tensor);
  return out;
}

double pruning_ratio(const FixedTensor& tile) {
  if (tile.raw.empty()) throw ShapeError("pruning ratio of an empty tile");
  const auto zeros = std::count(tile.raw.begin(), tile.raw.end(), 0);
  return static_cast<double>(zeros) / static_cast<double>(tile.raw.size());
}

Pruned topk_prune(const FixedTensor& scores, std::size_t k) {
  const std::size_t cols = scores.shape.cols;
  if (k < 1 || k > cols) throw ConfigError("top-k requires 1 <= k <= row length");
  Pruned out{FixedTensor::zeros(scores.shape, scores.fmt), {}};
  std::vector<std::size_t> idx(cols);
  for (std::size_t b = 0; b < scores.shape.batch; ++b) {
    for (std::size_t r = 0; r < scores.shape.rows; ++r) {
      const auto row = scores.row(b, r);
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::size_t x, std::size_t y) {
                          return row[x] > row[y] || (row[x] == row[y] && x < y);
                        });
      for (std::size_t i = 0; i < k; ++i) out.tensor.at(b, r, idx[i]) = row[idx[i]];
    }
  }
  out.mask = nonzero_mask(out.tensor);
  return out;
}

CompressedTile compress(const FixedTensor& tile, const Mask& mask) {
  if (mask.size() != tile.raw.size()) throw ShapeError("mask and tile sizes differ");
  CompressedTile ct{{}, mask, tile.fmt};
  ct.values.reserve(mask.popcount());
  for (std::size_t i = 0; i < tile.raw.size(); ++i) {
    const bool effectual = mask.test(i);
    if (effectual != (tile.raw[i] != 0)) {
      throw ShapeError("mask bit " + std::to_string(i) + " disagrees with the tile contents");
    }
    if (effectual) ct.values.push_back(tile.raw[i]);
  }
  return ct;
}

CompressedTile compress(const FixedTensor& tile) { return compress(tile, nonzero_mask(tile)); }

FixedTensor decompress(const CompressedTile& ct) {
  if (ct.values.size() != ct.mask.popcount()) {
    throw ShapeError("compressed value count does not match the mask popcount");
  }
  FixedTensor t = FixedTensor::zeros(ct.mask.shape(), ct.fmt);
  std::size_t next = 0;
  for (std::size_t i = 0; i < ct.mask.size(); ++i) {
    if (ct.mask.test(i)) t.raw[i] = ct.values[next++];
  }
  return t;
}

PairFiltered pair_filter(const CompressedTile& act, const CompressedTile& wt) {
  if (act.mask.size() != wt.mask.size()) throw ShapeError("paired masks have different lengths");
  if (act.values.size() != act.mask.popcount() || wt.values.size() != wt.mask.popcount()) {
    throw ShapeError("compressed value count does not match the mask popcount");
  }
  PairFiltered out;
  out.common = act.mask & wt.mask;
  out.act_filter = act.mask ^ out.common;
  out.wt_filter = wt.mask ^ out.common;
  const std::size_t n = out.common.popcount();
  out.act.reserve(n);
  out.wt.reserve(n);
  std::size_t ai = 0;
  std::size_t wi = 0;
  for (std::size_t i = 0; i < act.mask.size(); ++i) {
    const bool a = act.mask.test(i);
    const bool w = wt.mask.test(i);
    if (a && w) {
      out.act.push_back(act.values[ai]);
      out.wt.push_back(wt.values[wi]);
    }
    ai += a;
    wi += w;
  }
  return out;
}

CompressedTile post_expand(std::span<const Raw> results, const Mask& out_mask, FixedFormat fmt) {
  if (results.size() != out_mask.popcount()) {
    throw ShapeError("result count does not match the output mask popcount");
  }
  CompressedTile ct{{}, out_mask, fmt};
  std::size_t next = 0;
  for (std::size_t i = 0; i < out_mask.size(); ++i) {
    if (!out_mask.test(i)) continue;
    const Raw v = results[next++];
    if (v == 0) {
      ct.mask.set(i, false);
    } else {
      ct.values.push_back(v);
    }
  }
  return ct;
}

numerics::WideAcc compressed_dot(const CompressedTile& act, const CompressedTile& wt) {
  const PairFiltered f = pair_filter(act, wt);
  numerics::WideAcc acc = 0;
  for (std::size_t i = 0; i < f.act.size(); ++i) {
    acc += static_cast<numerics::WideAcc>(f.act[i]) * f.wt[i];
  }
  return acc;
}

namespace {

// Row i of a batch-1 compressed matrix as its own compressed vector.
CompressedTile row_vector(const CompressedTile& m, std::size_t row, std::size_t value_offset) {
  const std::size_t cols = m.mask.shape().cols;
  CompressedTile v{{}, Mask({1, 1, cols}), m.fmt};
  std::size_t next = value_offset;
  for (std::size_t c = 0; c < cols; ++c) {
    if (m.mask.test(row * cols + c)) {
      v.mask.set(c);
      v.values.push_back(m.values[next++]);
    }
  }
  return v;
}

}  // namespace

TileMacResult sparse_tile_mac(const CompressedTile& w, const CompressedTile& a) {
  const model::Shape ws = w.mask.shape();
  const model::Shape as = a.mask.shape();
  if (ws.batch != 1 || as.batch != 1) throw ShapeError("tile MAC expects batch-1 tiles");
  if (ws.cols != as.rows) throw ShapeError("tile MAC inner dimensions disagree");
  // columns of A become rows of A^T so both sides pair along k
  const CompressedTile at = compress(numerics::transpose(decompress(a)));
  std::vector<CompressedTile> w_rows;
  std::vector<CompressedTile> a_cols;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ws.rows; ++i) {
    w_rows.push_back(row_vector(w, i, offset));
    offset += w_rows.back().values.size();
  }
  offset = 0;
  for (std::size_t j = 0; j < as.cols; ++j) {
    a_cols.push_back(row_vector(at, j, offset));
    offset += a_cols.back().values.size();
  }
  TileMacResult out;
  out.partial.assign(ws.rows * as.cols, 0);
  for (std::size_t i = 0; i < ws.rows; ++i) {
    for (std::size_t j = 0; j < as.cols; ++j) {
      const PairFiltered f = pair_filter(a_cols[j], w_rows[i]);
      numerics::WideAcc acc = 0;
      for (std::size_t e = 0; e < f.act.size(); ++e) {
        acc += static_cast<numerics::WideAcc>(f.wt[e]) * f.act[e];
      }
      out.partial[i * as.cols + j] = acc;
      out.effectual_macs += f.act.size();
    }
  }
  return out;
}

std::size_t effectual_macs(const Mask& w, const Mask& a) {
  const model::Shape ws = w.shape();
  const model::Shape as = a.shape();
  if (ws.cols != as.rows) throw ShapeError("tile MAC inner dimensions disagree");
  const std::size_t y = ws.cols;
  if (y <= 64) {
    std::vector<std::uint64_t> wr(ws.rows, 0);
    std::vector<std::uint64_t> ac(as.cols, 0);
    for (std::size_t i = 0; i < ws.rows; ++i)
      for (std::size_t k = 0; k < y; ++k)
        if (w.test(i * y + k)) wr[i] |= std::uint64_t{1} << k;
    for (std::size_t k = 0; k < y; ++k)
      for (std::size_t j = 0; j < as.cols; ++j)
        if (a.test(k * as.cols + j)) ac[j] |= std::uint64_t{1} << k;
    std::size_t n = 0;
    for (auto r : wr)
      for (auto c : ac) n += static_cast<std::size_t>(std::popcount(r & c));
    return n;
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < ws.rows; ++i)
    for (std::size_t j = 0; j < as.cols; ++j)
      for (std::size_t k = 0; k < y; ++k) n += w.test(i * y + k) && a.test(k * as.cols + j);
  return n;
}

void validate_profile(const SparsityProfile& profile) {
  if (profile.points.empty()) throw ConfigError("sparsity profile has no points");
  for (std::size_t i = 0; i < profile.points.size(); ++i) {
    const auto& p = profile.points[i];
    if (!(p.tau >= 0)) throw ConfigError("profile threshold must be >= 0");
    if (!(p.rho >= 0 && p.rho <= 1)) throw ConfigError("profile sparsity must lie in [0, 1]");
    if (i > 0) {
      if (!(p.tau > profile.points[i - 1].tau)) throw ConfigError("profile thresholds must increase");
      if (p.rho < profile.points[i - 1].rho) throw ConfigError("profile sparsity must not decrease");
    }
  }
}

double threshold_lookup(const SparsityProfile& profile, double rho_target) {
  if (profile.points.empty()) throw ConfigError("sparsity profile has no points");
  if (!(rho_target >= 0 && rho_target <= 1)) throw ConfigError("target sparsity must lie in [0, 1]");
  const auto& pts = profile.points;
  if (rho_target <= pts.front().rho) return pts.front().tau;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].rho >= rho_target) {
      const auto& lo = pts[i - 1];
      const auto& hi = pts[i];
      if (lo.rho >= rho_target) return lo.tau;
      const double t = (rho_target - lo.rho) / (hi.rho - lo.rho);
      return lo.tau + t * (hi.tau - lo.tau);
    }
  }
  return pts.back().tau;
}

bool operand_pruned(const model::OpGraph& graph, const model::OpNode& node,
                    const model::Operand& operand, const PruneSettings& settings) {
  if (!settings.tau) return false;
  const model::TensorRole role = graph.tensor(operand.tensor).role;
  if (role == model::TensorRole::kLayerNormParams || operand.role == model::OperandRole::kParams) {
    return false;
  }
  switch (node.kind) {
    case model::OpKind::kMatmul:
      if (role == model::TensorRole::kActivation) return settings.prune_matmul_activations;
      return settings.prune_weights;
    case model::OpKind::kSoftmax: return settings.prune_softmax_input;
    case model::OpKind::kLayerNorm: return settings.prune_layernorm_input;
    case model::OpKind::kMemLoad: return false;
  }
  return false;
}

double SparsityStats::activation_sparsity() const {
  return activation_elements == 0
             ? 0.0
             : static_cast<double>(activation_zeros) / static_cast<double>(activation_elements);
}

double SparsityStats::weight_sparsity() const {
  return weight_elements == 0 ? 0.0
                              : static_cast<double>(weight_zeros) / static_cast<double>(weight_elements);
}

PrunedForward pruned_forward(const model::OpGraph& graph, const numerics::ModelWeights& weights,
                             std::span<const std::uint32_t> tokens, FixedFormat fmt,
                             const PruneSettings& settings) {
  PrunedForward out;
  const Raw tau_raw = settings.tau ? threshold_raw(*settings.tau, fmt) : 0;
  auto hook = [&](const model::OpNode& node, const model::Operand& operand, FixedTensor& t) {
    if (operand_pruned(graph, node, operand, settings)) dynatran_prune_inplace(t, tau_raw);
    const auto zeros = static_cast<std::uint64_t>(std::count(t.raw.begin(), t.raw.end(), 0));
    if (graph.tensor(operand.tensor).role == model::TensorRole::kActivation) {
      out.stats.activation_elements += t.raw.size();
      out.stats.activation_zeros += zeros;
    } else if (operand.role != model::OperandRole::kParams) {
      out.stats.weight_elements += t.raw.size();
      out.stats.weight_zeros += zeros;
    }
  };
  out.result = numerics::dense_forward_reference(graph, weights, tokens, fmt, hook);
  return out;
}

std::vector<double> default_tau_grid() {
  std::vector<double> grid(16);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = 0.1 * static_cast<double>(i) / 15.0;
  return grid;
}

SparsityProfile profile_thresholds(const model::ModelConfig& cfg,
                                   const numerics::ModelWeights& weights,
                                   std::span<const std::uint32_t> tokens, FixedFormat fmt,
                                   std::span<const double> tau_grid, PruneSettings settings) {
  if (tau_grid.empty()) throw ConfigError("threshold grid is empty");
  for (std::size_t i = 0; i < tau_grid.size(); ++i) {
    if (!(tau_grid[i] >= 0)) throw ConfigError("thresholds must be >= 0");
    if (i > 0 && !(tau_grid[i] > tau_grid[i - 1])) throw ConfigError("threshold grid must be sorted ascending");
  }
  const model::OpGraph graph = model::build_op_graph(cfg);
  // Thresholds are applied to the operands of one unpruned pass. Pruning inside the
  // loop perturbs later activations and can make the curve dip; this keeps it monotone.
  settings.tau = 0.0;
  std::vector<std::int64_t> magnitudes;  // operands DynaTran would see
  std::uint64_t fixed_zeros = 0;         // activation operands it never touches
  std::uint64_t total = 0;
  auto hook = [&](const model::OpNode& node, const model::Operand& operand, FixedTensor& t) {
    if (graph.tensor(operand.tensor).role != model::TensorRole::kActivation) return;
    total += t.raw.size();
    if (operand_pruned(graph, node, operand, settings)) {
      for (Raw v : t.raw) magnitudes.push_back(std::abs(static_cast<std::int64_t>(v)));
    } else {
      fixed_zeros += static_cast<std::uint64_t>(std::count(t.raw.begin(), t.raw.end(), 0));
    }
  };
  numerics::dense_forward_reference(graph, weights, tokens, fmt, hook);
  std::sort(magnitudes.begin(), magnitudes.end());

  SparsityProfile profile;
  profile.model_name = cfg.name;
  for (double tau : tau_grid) {
    const std::int64_t cut = std::max<std::int64_t>(threshold_raw(tau, fmt), 1);
    const auto below = std::lower_bound(magnitudes.begin(), magnitudes.end(), cut) - magnitudes.begin();
    const double rho = total == 0 ? 0.0
                                  : static_cast<double>(fixed_zeros + static_cast<std::uint64_t>(below)) /
                                        static_cast<double>(total);
    profile.points.push_back({tau, rho});
  }
  return profile;
}

}  // namespace acceltran::sparsity
