#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace acceltran::model {

/// Encoder-stack hyperparameters that define a workload.
struct ModelConfig {
  std::string name = "custom";
  std::size_t vocab_size = 30522;
  std::size_t max_seq_len = 512;
  std::size_t seq_len = 128;
  std::size_t batch = 1;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_dim = 512;
  double weight_sparsity = 0.0;

  std::size_t head_dim() const { return hidden / heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Throws ConfigError unless every invariant holds; returns the config unchanged.
/// A zero layer count is accepted and describes an embeddings-only pipeline.
ModelConfig validate_config(ModelConfig cfg);

ModelConfig bert_tiny();
ModelConfig bert_base();
std::optional<ModelConfig> find_preset(std::string_view name);

struct Shape {
  std::size_t batch = 1;
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t elements() const { return batch * rows * cols; }
  bool operator==(const Shape&) const = default;
};

using TensorId = std::uint32_t;
using NodeId = std::uint32_t;

enum class TensorRole { kEmbedding, kWeight, kLayerNormParams, kActivation };

struct TensorInfo {
  TensorId id = 0;
  std::string name;
  Shape shape;
  TensorRole role = TensorRole::kActivation;
  int layer = -1;
  int head = -1;
};

enum class OpKind { kMemLoad, kMatmul, kSoftmax, kLayerNorm };

std::string_view to_string(OpKind kind);

/// How a compute node consumes one of its operand tensors.
enum class OperandRole {
  kLhs,       // matmul left operand
  kRhs,       // matmul right operand
  kInput,     // softmax / layer-norm input; several are concatenated along columns
  kResidual,  // layer-norm residual, added to the concatenated input
  kParams,    // layer-norm gamma (row 0) and beta (row 1)
  kTable,     // embedding table read by the embedding load
};

struct Operand {
  TensorId tensor = 0;
  OperandRole role = OperandRole::kInput;
};

struct OpNode {
  NodeId id = 0;
  OpKind kind = OpKind::kMemLoad;
  std::string label;  // op tag, e.g. "C-OP-4"
  std::vector<Operand> operands;
  TensorId output = 0;
  std::vector<NodeId> deps;
  int layer = -1;
  std::optional<int> head;
  bool fused_gelu = false;
  bool transpose_rhs = false;  // QK^T reads K transposed
  double softmax_scale = 1.0;
};

class OpGraph {
 public:
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const std::vector<OpNode>& nodes() const { return nodes_; }
  const TensorInfo& tensor(TensorId id) const { return tensors_.at(id); }
  const OpNode& node(NodeId id) const { return nodes_.at(id); }

  /// Producer node of every tensor (loads produce weights).
  std::optional<NodeId> producer(TensorId id) const;
  TensorId final_output() const { return final_output_; }
  std::size_t compute_node_count() const;
  std::size_t count(OpKind kind) const;

  /// Kahn topological order; throws std::logic_error on a cycle.
  std::vector<NodeId> topological_order() const;
  /// Longest dependency chain from any source, per node.
  std::vector<std::size_t> depths() const;

  TensorId add_tensor(std::string name, Shape shape, TensorRole role, int layer, int head);
  NodeId add_node(OpNode node);
  void set_final_output(TensorId id) { final_output_ = id; }

 private:
  std::vector<TensorInfo> tensors_;
  std::vector<OpNode> nodes_;
  std::vector<std::optional<NodeId>> producer_;
  TensorId final_output_ = 0;
};

/// Expands the config into the layer-by-layer operation graph.
OpGraph build_op_graph(const ModelConfig& cfg);

struct MemoryFootprint {
  double embeddings_bytes = 0;
  double weights_bytes = 0;
  double activations_bytes = 0;
  double mask_bytes = 0;
  double total_bytes = 0;
};

MemoryFootprint memory_footprint(const ModelConfig& cfg, unsigned bits_per_element);

}  // namespace acceltran::model
