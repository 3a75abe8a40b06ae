#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "acceltran/model.hpp"

namespace acceltran::numerics {

using Raw = std::int32_t;
/// Accumulator wide enough for 2*(IL+FL) + log2(reduction) bits at any legal format.
using WideAcc = __int128;

/// Two's-complement fixed point with `integer_bits` (sign included) and `fraction_bits`.
struct FixedFormat {
  int integer_bits = 4;
  int fraction_bits = 16;

  int total_bits() const { return integer_bits + fraction_bits; }
  std::int64_t max_raw() const { return (std::int64_t{1} << (total_bits() - 1)) - 1; }
  std::int64_t min_raw() const { return -(std::int64_t{1} << (total_bits() - 1)); }
  double ulp() const;
  bool operator==(const FixedFormat&) const = default;
};

/// Validates IL >= 2, FL >= 0, IL + FL <= 32.
FixedFormat make_format(int integer_bits, int fraction_bits);

Raw saturate(std::int64_t raw, FixedFormat fmt);
Raw quantize(double x, FixedFormat fmt);
double dequantize(Raw raw, FixedFormat fmt);
Raw saturating_add(Raw a, Raw b, FixedFormat fmt);

/// Bits needed to accumulate `reduction` full-width products without overflow.
int accumulator_bits(FixedFormat fmt, std::size_t reduction);

/// Rounds an accumulator holding 2*FL fractional bits back into `fmt` (nearest-even, saturate).
Raw round_accumulator(WideAcc acc, FixedFormat fmt);

struct FixedTensor {
  model::Shape shape;
  FixedFormat fmt;
  std::vector<Raw> raw;

  static FixedTensor zeros(model::Shape shape, FixedFormat fmt);
  static FixedTensor from_real(model::Shape shape, std::span<const double> values, FixedFormat fmt);

  std::size_t index(std::size_t b, std::size_t r, std::size_t c) const {
    return (b * shape.rows + r) * shape.cols + c;
  }
  Raw at(std::size_t b, std::size_t r, std::size_t c) const { return raw[index(b, r, c)]; }
  Raw& at(std::size_t b, std::size_t r, std::size_t c) { return raw[index(b, r, c)]; }
  double real(std::size_t b, std::size_t r, std::size_t c) const {
    return dequantize(at(b, r, c), fmt);
  }
  std::span<const Raw> row(std::size_t b, std::size_t r) const {
    return {raw.data() + index(b, r, 0), shape.cols};
  }
  bool operator==(const FixedTensor&) const = default;
};

FixedTensor transpose(const FixedTensor& t);

/// Batched (b,x,y) x (b,y,z) product with exact wide-integer accumulation and a
/// single final rounding. Either operand may have batch 1 and is then broadcast.
FixedTensor mac_reference(const FixedTensor& w, const FixedTensor& a);

/// Tanh-approximation GeLU evaluated in double precision, then quantized.
Raw gelu(Raw x, FixedFormat fmt);
double gelu_real(double x);

/// Max-subtracted softmax of scale*row.
std::vector<Raw> softmax_row(std::span<const Raw> row, double scale, FixedFormat fmt);

inline constexpr double kLayerNormEps = 1e-5;

std::vector<Raw> layer_norm(std::span<const Raw> row, std::span<const Raw> gamma,
                            std::span<const Raw> beta, double eps, FixedFormat fmt);

/// Seeded synthetic parameters for every embedding/weight/layer-norm tensor of a graph,
/// indexed by tensor id (activations stay empty). Weight matrices are magnitude-pruned
/// to the configured static weight sparsity.
struct ModelWeights {
  std::vector<std::optional<FixedTensor>> tensors;

  const FixedTensor& at(model::TensorId id) const;
};

ModelWeights generate_weights(const model::OpGraph& graph, const model::ModelConfig& cfg,
                              FixedFormat fmt, std::uint64_t seed);

/// Seeded token ids, batch-major, `batch * seq_len` entries.
std::vector<std::uint32_t> generate_tokens(const model::ModelConfig& cfg, std::uint64_t seed);

/// Observer/transform applied to every compute operand before use. The tensor may be
/// modified in place (pruning) and is what the operation consumes.
using OperandHook =
    std::function<void(const model::OpNode&, const model::Operand&, FixedTensor&)>;

struct ForwardResult {
  FixedTensor output;
  /// Every activation tensor produced during the pass, indexed by tensor id.
  std::vector<std::optional<FixedTensor>> activations;
};

/// Node-level functional execution of the whole op graph: no tiling, no scheduling.
ForwardResult dense_forward_reference(const model::OpGraph& graph, const ModelWeights& weights,
                                      std::span<const std::uint32_t> tokens, FixedFormat fmt,
                                      const OperandHook& hook = {});

/// Embedding gather + position add for M-OP-0.
FixedTensor embed_tokens(const FixedTensor& word, const FixedTensor& pos,
                         std::span<const std::uint32_t> tokens, std::size_t batch,
                         std::size_t seq_len);

}  // namespace acceltran::numerics
