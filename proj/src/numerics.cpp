#include "acceltran/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cfenv>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "acceltran/error.hpp"

namespace acceltran::numerics {

double FixedFormat::ulp() const { return std::ldexp(1.0, -fraction_bits); }

FixedFormat make_format(int integer_bits, int fraction_bits) {
  if (integer_bits < 2) throw ConfigError("fixed-point integer bits must be >= 2 (sign included)");
  if (fraction_bits < 0) throw ConfigError("fixed-point fraction bits must be >= 0");
  if (integer_bits + fraction_bits > 32) throw ConfigError("fixed-point word exceeds 32 bits");
  return FixedFormat{integer_bits, fraction_bits};
}

Raw saturate(std::int64_t raw, FixedFormat fmt) {
  return static_cast<Raw>(std::clamp(raw, fmt.min_raw(), fmt.max_raw()));
}

Raw quantize(double x, FixedFormat fmt) {
  if (std::isnan(x)) return 0;
  const double scaled = std::ldexp(x, fmt.fraction_bits);
  if (scaled >= static_cast<double>(fmt.max_raw())) return static_cast<Raw>(fmt.max_raw());
  if (scaled <= static_cast<double>(fmt.min_raw())) return static_cast<Raw>(fmt.min_raw());
  // nearbyint honours the current rounding mode, which is ties-to-even by default
  return static_cast<Raw>(std::nearbyint(scaled));
}

double dequantize(Raw raw, FixedFormat fmt) { return std::ldexp(static_cast<double>(raw), -fmt.fraction_bits); }

Raw saturating_add(Raw a, Raw b, FixedFormat fmt) {
  return saturate(static_cast<std::int64_t>(a) + b, fmt);
}

int accumulator_bits(FixedFormat fmt, std::size_t reduction) {
  int guard = 0;
  while ((std::size_t{1} << guard) < reduction) ++guard;
  return 2 * fmt.total_bits() + guard;
}

Raw round_accumulator(WideAcc acc, FixedFormat fmt) {
  const int shift = fmt.fraction_bits;
  WideAcc q = acc;
  if (shift > 0) {
    q = acc >> shift;  // arithmetic shift: floor
    const WideAcc rem = acc - (q << shift);
    const WideAcc half = WideAcc{1} << (shift - 1);
    if (rem > half || (rem == half && (q & 1) != 0)) ++q;
  }
  if (q > fmt.max_raw()) return static_cast<Raw>(fmt.max_raw());
  if (q < fmt.min_raw()) return static_cast<Raw>(fmt.min_raw());
  return static_cast<Raw>(q);
}

FixedTensor FixedTensor::zeros(model::Shape shape, FixedFormat fmt) {
  return FixedTensor{shape, fmt, std::vector<Raw>(shape.elements(), 0)};
}

FixedTensor FixedTensor::from_real(model::Shape shape, std::span<const double> values,
                                   FixedFormat fmt) {
  if (values.size() != shape.elements()) throw ShapeError("value count does not match shape");
  FixedTensor t = zeros(shape, fmt);
  for (std::size_t i = 0; i < values.size(); ++i) t.raw[i] = quantize(values[i], fmt);
  return t;
}

FixedTensor transpose(const FixedTensor& t) {
  FixedTensor out = FixedTensor::zeros({t.shape.batch, t.shape.cols, t.shape.rows}, t.fmt);
  for (std::size_t b = 0; b < t.shape.batch; ++b)
    for (std::size_t r = 0; r < t.shape.rows; ++r)
      for (std::size_t c = 0; c < t.shape.cols; ++c) out.at(b, c, r) = t.at(b, r, c);
  return out;
}

namespace {

template <typename Acc>
void mac_kernel(const FixedTensor& w, const FixedTensor& a, FixedTensor& out) {
  const std::size_t x = w.shape.rows;
  const std::size_t y = w.shape.cols;
  const std::size_t z = a.shape.cols;
  std::vector<Acc> acc(z);
  for (std::size_t b = 0; b < out.shape.batch; ++b) {
    const std::size_t wb = w.shape.batch == 1 ? 0 : b;
    const std::size_t ab = a.shape.batch == 1 ? 0 : b;
    for (std::size_t i = 0; i < x; ++i) {
      std::fill(acc.begin(), acc.end(), Acc{0});
      const Raw* wrow = w.raw.data() + w.index(wb, i, 0);
      for (std::size_t k = 0; k < y; ++k) {
        const Acc wv = wrow[k];
        if (wv == 0) continue;
        const Raw* arow = a.raw.data() + a.index(ab, k, 0);
        for (std::size_t j = 0; j < z; ++j) acc[j] += wv * static_cast<Acc>(arow[j]);
      }
      for (std::size_t j = 0; j < z; ++j) out.at(b, i, j) = round_accumulator(acc[j], out.fmt);
    }
  }
}

}  // namespace

FixedTensor mac_reference(const FixedTensor& w, const FixedTensor& a) {
  if (w.fmt != a.fmt) throw ShapeError("matmul operands use different fixed-point formats");
  if (w.shape.cols != a.shape.rows) {
    throw ShapeError("matmul inner dimensions disagree: " + std::to_string(w.shape.cols) + " vs " +
                     std::to_string(a.shape.rows));
  }
  if (w.shape.batch != a.shape.batch && w.shape.batch != 1 && a.shape.batch != 1) {
    throw ShapeError("matmul batch dimensions disagree");
  }
  const std::size_t batch = std::max(w.shape.batch, a.shape.batch);
  FixedTensor out = FixedTensor::zeros({batch, w.shape.rows, a.shape.cols}, w.fmt);
  if (accumulator_bits(w.fmt, w.shape.cols) <= 63) {
    mac_kernel<std::int64_t>(w, a, out);
  } else {
    mac_kernel<WideAcc>(w, a, out);
  }
  return out;
}

double gelu_real(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Raw gelu(Raw x, FixedFormat fmt) { return quantize(gelu_real(dequantize(x, fmt)), fmt); }

std::vector<Raw> softmax_row(std::span<const Raw> row, double scale, FixedFormat fmt) {
  if (row.empty()) throw ShapeError("softmax of an empty row");
  if (!(scale > 0)) throw ConfigError("softmax scale must be positive");
  Raw max_raw = *std::max_element(row.begin(), row.end());
  const double max_v = scale * dequantize(max_raw, fmt);
  std::vector<double> e(row.size());
  double sum = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(scale * dequantize(row[i], fmt) - max_v);
    sum += e[i];
  }
  std::vector<Raw> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = quantize(e[i] / sum, fmt);
  return out;
}

std::vector<Raw> layer_norm(std::span<const Raw> row, std::span<const Raw> gamma,
                            std::span<const Raw> beta, double eps, FixedFormat fmt) {
  if (row.empty()) throw ShapeError("layer-norm of an empty row");
  if (gamma.size() != row.size() || beta.size() != row.size()) {
    throw ShapeError("layer-norm parameter length does not match the row");
  }
  if (!(eps > 0)) throw ConfigError("layer-norm eps must be positive");
  const double n = static_cast<double>(row.size());
  double mean = 0;
  for (Raw v : row) mean += dequantize(v, fmt);
  mean /= n;
  double var = 0;
  for (Raw v : row) {
    const double d = dequantize(v, fmt) - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<Raw> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double normed = (dequantize(row[i], fmt) - mean) * inv;
    out[i] = quantize(normed * dequantize(gamma[i], fmt) + dequantize(beta[i], fmt), fmt);
  }
  return out;
}

const FixedTensor& ModelWeights::at(model::TensorId id) const {
  if (id >= tensors.size() || !tensors[id]) {
    throw std::out_of_range("no parameter tensor with id " + std::to_string(id));
  }
  return *tensors[id];
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Zeroes the smallest-magnitude fraction of entries (ties broken by index).
void magnitude_prune(std::vector<double>& v, double fraction) {
  const auto drop = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(v.size())));
  if (drop == 0) return;
  if (drop >= v.size()) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(drop), idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     const double ma = std::abs(v[a]);
                     const double mb = std::abs(v[b]);
                     return ma < mb || (ma == mb && a < b);
                   });
  for (std::size_t i = 0; i < drop; ++i) v[idx[i]] = 0.0;
}

}  // namespace

ModelWeights generate_weights(const model::OpGraph& graph, const model::ModelConfig& cfg,
                              FixedFormat fmt, std::uint64_t seed) {
  ModelWeights weights;
  weights.tensors.resize(graph.tensors().size());
  for (const auto& info : graph.tensors()) {
    if (info.role == model::TensorRole::kActivation) continue;
    std::mt19937_64 rng(mix_seed(seed, info.id));
    std::vector<double> values(info.shape.elements());
    if (info.role == model::TensorRole::kLayerNormParams) {
      std::normal_distribution<double> gamma(1.0, 0.05);
      std::normal_distribution<double> beta(0.0, 0.02);
      const std::size_t h = info.shape.cols;
      for (std::size_t c = 0; c < h; ++c) values[c] = gamma(rng);
      for (std::size_t c = 0; c < h; ++c) values[h + c] = beta(rng);
    } else {
      const double fan_in = static_cast<double>(info.shape.rows);
      const double stddev =
          info.role == model::TensorRole::kEmbedding ? 0.5 : 0.5 / std::sqrt(fan_in);
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : values) v = dist(rng);
      magnitude_prune(values, cfg.weight_sparsity);
    }
    weights.tensors[info.id] = FixedTensor::from_real(info.shape, values, fmt);
  }
  return weights;
}

std::vector<std::uint32_t> generate_tokens(const model::ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xfeedULL));
  std::uniform_int_distribution<std::uint32_t> dist(0, static_cast<std::uint32_t>(cfg.vocab_size - 1));
  std::vector<std::uint32_t> tokens(cfg.batch * cfg.seq_len);
  for (auto& t : tokens) t = dist(rng);
  return tokens;
}

FixedTensor embed_tokens(const FixedTensor& word, const FixedTensor& pos,
                         std::span<const std::uint32_t> tokens, std::size_t batch,
                         std::size_t seq_len) {
  if (tokens.size() != batch * seq_len) throw ShapeError("token count does not match batch*seq");
  if (word.shape.cols != pos.shape.cols) throw ShapeError("embedding widths disagree");
  if (seq_len > pos.shape.rows) throw ShapeError("sequence longer than position table");
  const std::size_t h = word.shape.cols;
  FixedTensor out = FixedTensor::zeros({batch, seq_len, h}, word.fmt);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < seq_len; ++s) {
      const std::uint32_t tok = tokens[b * seq_len + s];
      if (tok >= word.shape.rows) throw ShapeError("token id outside vocabulary");
      for (std::size_t c = 0; c < h; ++c) {
        out.at(b, s, c) = saturating_add(word.at(0, tok, c), pos.at(0, s, c), word.fmt);
      }
    }
  }
  return out;
}

namespace {

FixedTensor apply_hook(const OperandHook& hook, const model::OpNode& node,
                       const model::Operand& operand, const FixedTensor& source) {
  FixedTensor copy = source;
  if (hook) hook(node, operand, copy);
  return copy;
}

}  // namespace

ForwardResult dense_forward_reference(const model::OpGraph& graph, const ModelWeights& weights,
                                      std::span<const std::uint32_t> tokens, FixedFormat fmt,
                                      const OperandHook& hook) {
  ForwardResult result;
  auto& acts = result.activations;
  acts.resize(graph.tensors().size());

  auto fetch = [&](model::TensorId id) -> const FixedTensor& {
    if (graph.tensor(id).role == model::TensorRole::kActivation) {
      if (!acts[id]) throw std::logic_error("activation consumed before it was produced");
      return *acts[id];
    }
    return weights.at(id);
  };

  for (model::NodeId id : graph.topological_order()) {
    const model::OpNode& node = graph.node(id);
    const model::Shape out_shape = graph.tensor(node.output).shape;
    switch (node.kind) {
      case model::OpKind::kMemLoad: {
        if (node.operands.empty()) break;  // parameter load: values come from `weights`
        const FixedTensor& word = fetch(node.operands.at(0).tensor);
        const FixedTensor& pos = fetch(node.operands.at(1).tensor);
        acts[node.output] = embed_tokens(word, pos, tokens, out_shape.batch, out_shape.rows);
        break;
      }
      case model::OpKind::kMatmul: {
        const model::Operand& lhs_op = node.operands.at(0);
        const model::Operand& rhs_op = node.operands.at(1);
        FixedTensor lhs = apply_hook(hook, node, lhs_op, fetch(lhs_op.tensor));
        FixedTensor rhs = apply_hook(hook, node, rhs_op, fetch(rhs_op.tensor));
        if (node.transpose_rhs) rhs = transpose(rhs);
        FixedTensor out = mac_reference(lhs, rhs);
        if (node.fused_gelu) {
          for (Raw& v : out.raw) v = gelu(v, fmt);
        }
        if (out.shape != out_shape) throw ShapeError("matmul output shape mismatch at " + node.label);
        acts[node.output] = std::move(out);
        break;
      }
      case model::OpKind::kSoftmax: {
        FixedTensor in = apply_hook(hook, node, node.operands.at(0), fetch(node.operands.at(0).tensor));
        FixedTensor out = FixedTensor::zeros(out_shape, fmt);
        for (std::size_t b = 0; b < out_shape.batch; ++b) {
          for (std::size_t r = 0; r < out_shape.rows; ++r) {
            auto row = softmax_row(in.row(b, r), node.softmax_scale, fmt);
            std::copy(row.begin(), row.end(), out.raw.begin() + static_cast<std::ptrdiff_t>(out.index(b, r, 0)));
          }
        }
        acts[node.output] = std::move(out);
        break;
      }
      case model::OpKind::kLayerNorm: {
        FixedTensor x = FixedTensor::zeros(out_shape, fmt);
        const FixedTensor* params = nullptr;
        std::size_t col = 0;
        for (const auto& operand : node.operands) {
          if (operand.role == model::OperandRole::kParams) {
            params = &fetch(operand.tensor);
            continue;
          }
          FixedTensor in = apply_hook(hook, node, operand, fetch(operand.tensor));
          if (in.shape.batch != out_shape.batch || in.shape.rows != out_shape.rows) {
            throw ShapeError("layer-norm operand rows disagree at " + node.label);
          }
          const std::size_t offset = operand.role == model::OperandRole::kResidual ? 0 : col;
          if (offset + in.shape.cols > out_shape.cols) throw ShapeError("layer-norm input too wide");
          for (std::size_t b = 0; b < out_shape.batch; ++b)
            for (std::size_t r = 0; r < out_shape.rows; ++r)
              for (std::size_t c = 0; c < in.shape.cols; ++c) {
                Raw& dst = x.at(b, r, offset + c);
                dst = saturating_add(dst, in.at(b, r, c), fmt);
              }
          if (operand.role != model::OperandRole::kResidual) col += in.shape.cols;
        }
        if (params == nullptr) throw ShapeError("layer-norm node without parameters");
        if (col != out_shape.cols) throw ShapeError("layer-norm inputs do not cover the row");
        const auto gamma = params->row(0, 0);
        const auto beta = params->row(0, 1);
        FixedTensor out = FixedTensor::zeros(out_shape, fmt);
        for (std::size_t b = 0; b < out_shape.batch; ++b)
          for (std::size_t r = 0; r < out_shape.rows; ++r) {
            auto row = layer_norm(x.row(b, r), gamma, beta, kLayerNormEps, fmt);
            std::copy(row.begin(), row.end(), out.raw.begin() + static_cast<std::ptrdiff_t>(out.index(b, r, 0)));
          }
        acts[node.output] = std::move(out);
        break;
      }
    }
  }
  const model::TensorId final_id = graph.final_output();
  result.output = *acts.at(final_id);
  return result;
}

}  // namespace acceltran::numerics
