#include "acceltran/model.hpp"

#include <cmath>
#include <algorithm>
#include <deque>
#include <stdexcept>
#include <tuple>

#include "acceltran/error.hpp"

namespace acceltran::model {

ModelConfig validate_config(ModelConfig cfg) {
  auto require_positive = [](std::size_t value, const char* field) {
    if (value == 0) throw ConfigError(std::string("model field '") + field + "' must be >= 1");
  };
  require_positive(cfg.vocab_size, "vocab_size");
  require_positive(cfg.max_seq_len, "max_seq_len");
  require_positive(cfg.seq_len, "seq_len");
  require_positive(cfg.batch, "batch");
  require_positive(cfg.hidden, "hidden");
  require_positive(cfg.heads, "heads");
  require_positive(cfg.ff_dim, "ff_dim");
  if (cfg.hidden % cfg.heads != 0) {
    throw ConfigError("hidden size " + std::to_string(cfg.hidden) + " is not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  }
  if (cfg.seq_len > cfg.max_seq_len) {
    throw ConfigError("seq_len " + std::to_string(cfg.seq_len) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  if (!(cfg.weight_sparsity >= 0.0 && cfg.weight_sparsity <= 1.0)) {
    throw ConfigError("weight_sparsity must lie in [0, 1]");
  }
  return cfg;
}

ModelConfig bert_tiny() {
  ModelConfig cfg;
  cfg.name = "bert-tiny";
  cfg.hidden = 128;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ff_dim = 4 * cfg.hidden;
  cfg.weight_sparsity = 0.5;
  return cfg;
}

ModelConfig bert_base() {
  ModelConfig cfg;
  cfg.name = "bert-base";
  cfg.hidden = 768;
  cfg.layers = 12;
  cfg.heads = 12;
  cfg.ff_dim = 4 * cfg.hidden;
  cfg.weight_sparsity = 0.5;
  return cfg;
}

std::optional<ModelConfig> find_preset(std::string_view name) {
  if (name == "bert-tiny") return bert_tiny();
  if (name == "bert-base") return bert_base();
  return std::nullopt;
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::kMemLoad: return "mem-load";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer-norm";
  }
  return "?";
}

std::optional<NodeId> OpGraph::producer(TensorId id) const { return producer_.at(id); }

std::size_t OpGraph::compute_node_count() const {
  return nodes_.size() - count(OpKind::kMemLoad);
}

std::size_t OpGraph::count(OpKind kind) const {
  std::size_t n = 0;
  for (const auto& node : nodes_) n += node.kind == kind;
  return n;
}

TensorId OpGraph::add_tensor(std::string name, Shape shape, TensorRole role, int layer, int head) {
  TensorInfo info;
  info.id = static_cast<TensorId>(tensors_.size());
  info.name = std::move(name);
  info.shape = shape;
  info.role = role;
  info.layer = layer;
  info.head = head;
  tensors_.push_back(std::move(info));
  producer_.emplace_back();
  return tensors_.back().id;
}

NodeId OpGraph::add_node(OpNode node) {
  node.id = static_cast<NodeId>(nodes_.size());
  for (NodeId dep : node.deps) {
    if (dep >= node.id) throw std::logic_error("node dependency must reference an earlier node");
  }
  producer_.at(node.output) = node.id;
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

std::vector<NodeId> OpGraph::topological_order() const {
  std::vector<std::size_t> indegree(nodes_.size(), 0);
  std::vector<std::vector<NodeId>> users(nodes_.size());
  for (const auto& node : nodes_) {
    indegree[node.id] = node.deps.size();
    for (NodeId dep : node.deps) users.at(dep).push_back(node.id);
  }
  std::deque<NodeId> frontier;
  for (const auto& node : nodes_) {
    if (indegree[node.id] == 0) frontier.push_back(node.id);
  }
  std::vector<NodeId> order;
  order.reserve(nodes_.size());
  while (!frontier.empty()) {
    NodeId id = frontier.front();
    frontier.pop_front();
    order.push_back(id);
    for (NodeId user : users[id]) {
      if (--indegree[user] == 0) frontier.push_back(user);
    }
  }
  if (order.size() != nodes_.size()) throw std::logic_error("operation graph contains a cycle");
  return order;
}

std::vector<std::size_t> OpGraph::depths() const {
  std::vector<std::size_t> depth(nodes_.size(), 0);
  for (NodeId id : topological_order()) {
    for (NodeId dep : nodes_[id].deps) depth[id] = std::max(depth[id], depth[dep] + 1);
  }
  return depth;
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(const ModelConfig& cfg) : cfg_(cfg) {}

  OpGraph build() {
    const Shape tokens{cfg_.batch, cfg_.seq_len, cfg_.hidden};
    TensorId word = graph_.add_tensor("word_embeddings", {1, cfg_.vocab_size, cfg_.hidden},
                                      TensorRole::kEmbedding, -1, -1);
    TensorId pos = graph_.add_tensor("position_embeddings", {1, cfg_.max_seq_len, cfg_.hidden},
                                     TensorRole::kEmbedding, -1, -1);
    TensorId h = graph_.add_tensor("H", tokens, TensorRole::kActivation, -1, -1);
    OpNode embed;
    embed.kind = OpKind::kMemLoad;
    embed.label = "M-OP-0";
    embed.operands = {{word, OperandRole::kTable}, {pos, OperandRole::kTable}};
    embed.output = h;
    NodeId h_node = graph_.add_node(std::move(embed));

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      std::tie(h, h_node) = add_layer(static_cast<int>(l), h, h_node);
    }
    graph_.set_final_output(h);
    return std::move(graph_);
  }

 private:
  NodeId load(const std::string& label, const std::string& name, Shape shape, TensorRole role,
              int layer, int head) {
    TensorId t = graph_.add_tensor(name, shape, role, layer, head);
    OpNode node;
    node.kind = OpKind::kMemLoad;
    node.label = label;
    node.output = t;
    node.layer = layer;
    if (head >= 0) node.head = head;
    return graph_.add_node(std::move(node));
  }

  NodeId matmul(const std::string& label, const std::string& name, NodeId lhs, NodeId rhs,
                int layer, int head, bool transpose_rhs = false, bool gelu = false) {
    const Shape& a = graph_.tensor(graph_.node(lhs).output).shape;
    const Shape& b = graph_.tensor(graph_.node(rhs).output).shape;
    const std::size_t inner = transpose_rhs ? b.cols : b.rows;
    const std::size_t cols = transpose_rhs ? b.rows : b.cols;
    if (a.cols != inner) throw ShapeError("matmul inner dimensions disagree for " + name);
    TensorId out = graph_.add_tensor(name, {a.batch, a.rows, cols}, TensorRole::kActivation,
                                     layer, head);
    OpNode node;
    node.kind = OpKind::kMatmul;
    node.label = label;
    node.operands = {{graph_.node(lhs).output, OperandRole::kLhs},
                     {graph_.node(rhs).output, OperandRole::kRhs}};
    node.output = out;
    node.deps = {lhs, rhs};
    node.layer = layer;
    if (head >= 0) node.head = head;
    node.transpose_rhs = transpose_rhs;
    node.fused_gelu = gelu;
    return graph_.add_node(std::move(node));
  }

  std::pair<TensorId, NodeId> add_layer(int l, TensorId h, NodeId h_node) {
    const std::size_t d = cfg_.head_dim();
    const std::string prefix = "L" + std::to_string(l) + ".";
    std::vector<NodeId> head_outputs;
    for (int i = 0; i < static_cast<int>(cfg_.heads); ++i) {
      const std::string hp = prefix + "h" + std::to_string(i) + ".";
      NodeId wq = load("M-OP-1", hp + "WQ", {1, cfg_.hidden, d}, TensorRole::kWeight, l, i);
      NodeId wk = load("M-OP-2", hp + "WK", {1, cfg_.hidden, d}, TensorRole::kWeight, l, i);
      NodeId wv = load("M-OP-3", hp + "WV", {1, cfg_.hidden, d}, TensorRole::kWeight, l, i);
      NodeId wo = load("M-OP-4", hp + "WO", {1, d, d}, TensorRole::kWeight, l, i);
      NodeId q = matmul("C-OP-1", hp + "Q", h_node, wq, l, i);
      NodeId k = matmul("C-OP-2", hp + "K", h_node, wk, l, i);
      NodeId v = matmul("C-OP-3", hp + "V", h_node, wv, l, i);
      NodeId a = matmul("C-OP-4", hp + "A", q, k, l, i, /*transpose_rhs=*/true);

      TensorId a_t = graph_.node(a).output;
      TensorId s_t = graph_.add_tensor(hp + "S", graph_.tensor(a_t).shape,
                                       TensorRole::kActivation, l, i);
      OpNode softmax;
      softmax.kind = OpKind::kSoftmax;
      softmax.label = "C-OP-5";
      softmax.operands = {{a_t, OperandRole::kInput}};
      softmax.output = s_t;
      softmax.deps = {a};
      softmax.layer = l;
      softmax.head = i;
      softmax.softmax_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
      NodeId s = graph_.add_node(std::move(softmax));

      NodeId p = matmul("C-OP-6", hp + "P", s, v, l, i);
      head_outputs.push_back(matmul("C-OP-7", hp + "H_MHA", p, wo, l, i));
    }

    NodeId ln1_params = load("M-OP-LN", prefix + "LN1", {1, 2, cfg_.hidden},
                             TensorRole::kLayerNormParams, l, -1);
    OpNode ln1;
    ln1.kind = OpKind::kLayerNorm;
    ln1.label = "C-OP-8";
    for (NodeId ho : head_outputs) {
      ln1.operands.push_back({graph_.node(ho).output, OperandRole::kInput});
      ln1.deps.push_back(ho);
    }
    ln1.operands.push_back({h, OperandRole::kResidual});
    ln1.operands.push_back({graph_.node(ln1_params).output, OperandRole::kParams});
    ln1.deps.push_back(h_node);
    ln1.deps.push_back(ln1_params);
    ln1.output = graph_.add_tensor(prefix + "H_LN", graph_.tensor(h).shape,
                                   TensorRole::kActivation, l, -1);
    ln1.layer = l;
    NodeId hln = graph_.add_node(std::move(ln1));

    NodeId wf1 = load("M-OP-5", prefix + "WF1", {1, cfg_.hidden, cfg_.ff_dim},
                      TensorRole::kWeight, l, -1);
    NodeId wf2 = load("M-OP-6", prefix + "WF2", {1, cfg_.ff_dim, cfg_.hidden},
                      TensorRole::kWeight, l, -1);
    NodeId f1 = matmul("C-OP-9", prefix + "H_F1", hln, wf1, l, -1, false, /*gelu=*/true);
    NodeId f2 = matmul("C-OP-10", prefix + "H_F2", f1, wf2, l, -1, false, /*gelu=*/true);

    NodeId ln2_params = load("M-OP-LN", prefix + "LN2", {1, 2, cfg_.hidden},
                             TensorRole::kLayerNormParams, l, -1);
    OpNode ln2;
    ln2.kind = OpKind::kLayerNorm;
    ln2.label = "C-OP-11";
    ln2.operands = {{graph_.node(f2).output, OperandRole::kInput},
                    {graph_.node(ln2_params).output, OperandRole::kParams}};
    ln2.deps = {f2, ln2_params};
    ln2.output = graph_.add_tensor(prefix + "H_O", graph_.tensor(h).shape,
                                   TensorRole::kActivation, l, -1);
    ln2.layer = l;
    NodeId out = graph_.add_node(std::move(ln2));
    return {graph_.node(out).output, out};
  }

  const ModelConfig& cfg_;
  OpGraph graph_;
};

}  // namespace

OpGraph build_op_graph(const ModelConfig& cfg) {
  return GraphBuilder(validate_config(cfg)).build();
}

MemoryFootprint memory_footprint(const ModelConfig& cfg, unsigned bits_per_element) {
  if (bits_per_element == 0) throw ConfigError("bits_per_element must be >= 1");
  const OpGraph graph = build_op_graph(cfg);
  const double bytes_per_element = bits_per_element / 8.0;
  double weight_elements = 0;
  double activation_elements = 0;
  for (const auto& t : graph.tensors()) {
    const double n = static_cast<double>(t.shape.elements());
    switch (t.role) {
      case TensorRole::kWeight:
      case TensorRole::kLayerNormParams: weight_elements += n; break;
      case TensorRole::kActivation: activation_elements += n; break;
      case TensorRole::kEmbedding: break;
    }
  }
  MemoryFootprint fp;
  fp.embeddings_bytes =
      static_cast<double>((cfg.vocab_size + cfg.max_seq_len) * cfg.hidden) * bytes_per_element;
  fp.weights_bytes = weight_elements * bytes_per_element * (1.0 - cfg.weight_sparsity);
  fp.activations_bytes = activation_elements * bytes_per_element;
  fp.mask_bytes = (weight_elements + activation_elements) / 8.0;
  fp.total_bytes = fp.embeddings_bytes + fp.weights_bytes + fp.activations_bytes + fp.mask_bytes;
  return fp;
}

}  // namespace acceltran::model
