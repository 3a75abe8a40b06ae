#include "acceltran/sched.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

#include "acceltran/error.hpp"

namespace acceltran::sched {

std::string_view to_string(SchedKind kind) {
  switch (kind) {
    case SchedKind::kLoad: return "load";
    case SchedKind::kMatmulTile: return "matmul-tile";
    case SchedKind::kSoftmaxRows: return "softmax-rows";
    case SchedKind::kLayerNormRows: return "layernorm-rows";
    case SchedKind::kStore: return "store";
  }
  return "?";
}

std::string_view to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::kMacLane: return "mac-lane";
    case ModuleKind::kSoftmax: return "softmax";
    case ModuleKind::kLayerNorm: return "layer-norm";
  }
  return "?";
}

std::optional<ModuleKind> module_kind(SchedKind kind) {
  switch (kind) {
    case SchedKind::kMatmulTile: return ModuleKind::kMacLane;
    case SchedKind::kSoftmaxRows: return ModuleKind::kSoftmax;
    case SchedKind::kLayerNormRows: return ModuleKind::kLayerNorm;
    default: return std::nullopt;
  }
}

std::string_view to_string(StallReason reason) {
  switch (reason) {
    case StallReason::kComputeNoModule: return "compute-no-module";
    case StallReason::kComputeOperandMissing: return "compute-operand-missing";
    case StallReason::kMemBufferBusy: return "mem-buffer-busy";
    case StallReason::kMemBufferFull: return "mem-buffer-full";
    case StallReason::kMemStoreBeforeCompute: return "mem-store-before-compute";
  }
  return "?";
}

bool is_compute_stall(StallReason reason) {
  return reason == StallReason::kComputeNoModule || reason == StallReason::kComputeOperandMissing;
}

std::string_view to_string(OpStatus status) {
  switch (status) {
    case OpStatus::kWaiting: return "waiting";
    case OpStatus::kReady: return "ready";
    case OpStatus::kIssued: return "issued";
    case OpStatus::kDone: return "done";
  }
  return "?";
}

std::vector<TileId> SchedGraph::overlapping(model::TensorId tensor, std::size_t b0, std::size_t b1,
                                            std::size_t r0, std::size_t r1, std::size_t c0,
                                            std::size_t c1) const {
  const TensorTiling& tt = tensor_tiles.at(tensor);
  std::vector<TileId> out;
  if (b1 <= b0 || r1 <= r0 || c1 <= c0) return out;
  const std::size_t bb = b0 / tt.tb, be = std::min(tt.nb, (b1 + tt.tb - 1) / tt.tb);
  const std::size_t rb = r0 / tt.tr, re = std::min(tt.nr, (r1 + tt.tr - 1) / tt.tr);
  const std::size_t cb = c0 / tt.tc, ce = std::min(tt.nc, (c1 + tt.tc - 1) / tt.tc);
  for (std::size_t b = bb; b < be; ++b)
    for (std::size_t r = rb; r < re; ++r)
      for (std::size_t c = cb; c < ce; ++c)
        out.push_back(tt.first + static_cast<TileId>((b * tt.nr + r) * tt.nc + c));
  return out;
}

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

class SchedBuilder {
 public:
  SchedBuilder(const model::OpGraph& graph, const tiling::TileSpec& spec, const tiling::Dataflow& df)
      : graph_(graph), depth_(graph.depths()) {
    tiling::validate(spec);
    g_.spec = spec;
    g_.dataflow = df;
  }

  SchedGraph build() {
    make_tiles();
    // loads of weights are queued by their first consumer, so the FIFO follows use order
    for (model::NodeId id : graph_.topological_order()) {
      const model::OpNode& node = graph_.node(id);
      switch (node.kind) {
        case model::OpKind::kMemLoad:
          if (!node.operands.empty()) add_embedding_load(node);
          break;
        case model::OpKind::kMatmul: add_matmul(node); break;
        case model::OpKind::kSoftmax:
        case model::OpKind::kLayerNorm: add_rows(node); break;
      }
    }
    for (auto& op : g_.ops) {
      std::sort(op.deps.begin(), op.deps.end());
      op.deps.erase(std::unique(op.deps.begin(), op.deps.end()), op.deps.end());
      for (OpId d : op.deps) g_.ops[d].users.push_back(op.id);
      for (const TileRead& r : op.reads) ++g_.tiles[r.tile].readers;
    }
    return std::move(g_);
  }

 private:
  void make_tiles() {
    g_.tensor_tiles.resize(graph_.tensors().size());
    for (const auto& t : graph_.tensors()) {
      TensorTiling tt;
      tt.first = static_cast<TileId>(g_.tiles.size());
      const bool embedding = t.role == model::TensorRole::kEmbedding;
      tt.tb = embedding ? t.shape.batch : g_.spec.tb;
      tt.tr = embedding ? t.shape.rows : g_.spec.tx;
      tt.tc = embedding ? t.shape.cols : g_.spec.ty;
      tt.nb = ceil_div(t.shape.batch, tt.tb);
      tt.nr = ceil_div(t.shape.rows, tt.tr);
      tt.nc = ceil_div(t.shape.cols, tt.tc);
      const bool act = t.role == model::TensorRole::kActivation;
      for (std::size_t b = 0; b < tt.nb; ++b)
        for (std::size_t r = 0; r < tt.nr; ++r)
          for (std::size_t c = 0; c < tt.nc; ++c) {
            StorageTile st;
            st.id = static_cast<TileId>(g_.tiles.size());
            st.tensor = t.id;
            st.b0 = b * tt.tb;
            st.r0 = r * tt.tr;
            st.c0 = c * tt.tc;
            st.eb = std::min(tt.tb, t.shape.batch - st.b0);
            st.er = std::min(tt.tr, t.shape.rows - st.r0);
            st.ec = std::min(tt.tc, t.shape.cols - st.c0);
            st.buffer = act ? arch::BufferKind::kActivation : arch::BufferKind::kWeight;
            st.pinned = embedding || t.id == graph_.final_output();
            g_.tiles.push_back(st);
          }
      g_.tensor_tiles[t.id] = tt;
    }
  }

  OpId new_op(SchedKind kind, const model::OpNode& node, std::size_t seq) {
    SchedOp op;
    op.id = static_cast<OpId>(g_.ops.size());
    op.kind = kind;
    op.node = node.id;
    op.layer = node.layer;
    op.head = node.head ? *node.head : -1;
    op.depth = depth_.at(node.id);
    op.seq = seq;
    g_.ops.push_back(std::move(op));
    return g_.ops.back().id;
  }

  std::vector<TileId> all_tiles(model::TensorId t) const {
    const model::Shape s = graph_.tensor(t).shape;
    return g_.overlapping(t, 0, s.batch, 0, s.rows, 0, s.cols);
  }

  void add_embedding_load(const model::OpNode& node) {
    const OpId id = new_op(SchedKind::kLoad, node, 0);
    for (const auto& operand : node.operands) {
      for (TileId t : all_tiles(operand.tensor)) attach_write(id, t);
    }
    for (TileId t : all_tiles(node.output)) attach_write(id, t);
    g_.embedding_load = id;
    g_.load_order.push_back(id);
  }

  void attach_write(OpId op, TileId tile) {
    g_.ops[op].writes.push_back(tile);
    g_.tiles[tile].producer = op;
  }

  // One DMA op per storage tile of a parameter tensor, emitted on first use.
  void ensure_loaded(model::TensorId tensor) {
    if (graph_.tensor(tensor).role == model::TensorRole::kActivation) return;
    if (graph_.tensor(tensor).role == model::TensorRole::kEmbedding) return;
    if (loaded_.count(tensor)) return;
    loaded_[tensor] = true;
    const model::OpNode& node = graph_.node(*graph_.producer(tensor));
    std::size_t seq = 0;
    for (TileId t : all_tiles(tensor)) {
      const OpId id = new_op(SchedKind::kLoad, node, seq++);
      attach_write(id, t);
      g_.load_order.push_back(id);
    }
  }

  void read_region(OpId op, std::size_t operand, model::TensorId tensor, std::size_t b0,
                   std::size_t b1, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    const model::Shape s = graph_.tensor(tensor).shape;
    if (s.batch == 1) {
      b0 = 0;
      b1 = 1;
    }
    for (TileId t : g_.overlapping(tensor, b0, b1, r0, r1, c0, c1)) {
      g_.ops[op].reads.push_back({t, operand});
      const OpId producer = g_.tiles[t].producer;
      if (producer == kNoOp) throw std::logic_error("storage tile read before it is produced");
      g_.ops[op].deps.push_back(producer);
    }
  }

  void add_store(OpId producer, TileId tile, std::size_t seq) {
    const model::OpNode& node = graph_.node(g_.ops[producer].node);
    const OpId id = new_op(SchedKind::kStore, node, seq);
    g_.ops[id].producer = producer;
    g_.ops[id].deps.push_back(producer);
    attach_write(id, tile);
  }

  void add_matmul(const model::OpNode& node) {
    const model::Operand& lhs = node.operands.at(0);
    const model::Operand& rhs = node.operands.at(1);
    ensure_loaded(lhs.tensor);
    ensure_loaded(rhs.tensor);
    const model::Shape ls = graph_.tensor(lhs.tensor).shape;
    const model::Shape rs = graph_.tensor(rhs.tensor).shape;
    const model::Shape os = graph_.tensor(node.output).shape;
    const std::size_t inner = node.transpose_rhs ? rs.cols : rs.rows;
    const tiling::MatmulDims dims{os.batch, ls.rows, inner, os.cols};
    const auto tiles = tiling::tile_matmul(dims, g_.spec, g_.dataflow, node.id);
    const tiling::TileGrid grid = tiling::tile_grid(dims, g_.spec);
    std::vector<OpId> last_in_chain(grid.nb * grid.ni * grid.nj, kNoOp);
    std::size_t seq = 0;
    for (const tiling::TiledOp& t : tiles) {
      const OpId id = new_op(SchedKind::kMatmulTile, node, seq++);
      g_.ops[id].mm = t;
      read_region(id, 0, lhs.tensor, t.b0, t.b0 + t.eb, t.i0, t.i0 + t.ex, t.k0, t.k0 + t.ey);
      if (node.transpose_rhs) {
        read_region(id, 1, rhs.tensor, t.b0, t.b0 + t.eb, t.j0, t.j0 + t.ez, t.k0, t.k0 + t.ey);
      } else {
        read_region(id, 1, rhs.tensor, t.b0, t.b0 + t.eb, t.k0, t.k0 + t.ey, t.j0, t.j0 + t.ez);
      }
      const std::size_t key = (t.idx.b * grid.ni + t.idx.i) * grid.nj + t.idx.j;
      if (last_in_chain[key] != kNoOp) g_.ops[id].deps.push_back(last_in_chain[key]);
      last_in_chain[key] = id;
      if (t.idx.k + 1 == grid.nk) {
        g_.ops[id].last_k = true;
        const auto out = g_.overlapping(node.output, t.b0, t.b0 + t.eb, t.i0, t.i0 + t.ex, t.j0,
                                        t.j0 + t.ez);
        for (TileId o : out) add_store(id, o, seq++);
      }
    }
  }

  void add_rows(const model::OpNode& node) {
    for (const auto& operand : node.operands) ensure_loaded(operand.tensor);
    const model::Shape os = graph_.tensor(node.output).shape;
    const SchedKind kind = node.kind == model::OpKind::kSoftmax ? SchedKind::kSoftmaxRows
                                                                : SchedKind::kLayerNormRows;
    std::size_t seq = 0;
    for (std::size_t b0 = 0; b0 < os.batch; b0 += g_.spec.tb) {
      for (std::size_t r0 = 0; r0 < os.rows; r0 += g_.spec.tx) {
        const std::size_t eb = std::min(g_.spec.tb, os.batch - b0);
        const std::size_t er = std::min(g_.spec.tx, os.rows - r0);
        const OpId id = new_op(kind, node, seq++);
        g_.ops[id].b0 = b0;
        g_.ops[id].eb = eb;
        g_.ops[id].r0 = r0;
        g_.ops[id].er = er;
        for (std::size_t o = 0; o < node.operands.size(); ++o) {
          const model::Operand& operand = node.operands[o];
          const model::Shape s = graph_.tensor(operand.tensor).shape;
          if (operand.role == model::OperandRole::kParams) {
            read_region(id, o, operand.tensor, 0, 1, 0, s.rows, 0, s.cols);
          } else {
            read_region(id, o, operand.tensor, b0, b0 + eb, r0, r0 + er, 0, s.cols);
          }
        }
        for (TileId t : g_.overlapping(node.output, b0, b0 + eb, r0, r0 + er, 0, os.cols)) {
          add_store(id, t, seq++);
        }
      }
    }
  }

  const model::OpGraph& graph_;
  std::vector<std::size_t> depth_;
  SchedGraph g_;
  std::map<model::TensorId, bool> loaded_;
};

}  // namespace

SchedGraph build_sched_graph(const model::OpGraph& graph, const tiling::TileSpec& spec,
                             const tiling::Dataflow& df) {
  return SchedBuilder(graph, spec, df).build();
}

Priority make_priority(std::size_t heads, bool stagger) {
  Priority p;
  p.stagger_enabled = stagger;
  p.head_rank.resize(heads);
  std::iota(p.head_rank.begin(), p.head_rank.end(), 0);
  return p;
}

PriorityKey priority_key(const SchedOp& op, const Priority& priority, std::size_t heads) {
  std::int64_t rank = static_cast<std::int64_t>(heads);
  if (op.head >= 0) {
    const auto h = static_cast<std::size_t>(op.head);
    rank = h < priority.head_rank.size() ? priority.head_rank[h] : op.head;
  }
  const auto layer = static_cast<std::int64_t>(op.layer);
  const auto depth = static_cast<std::int64_t>(op.depth);
  const auto id = static_cast<std::int64_t>(op.id);
  if (priority.stagger_enabled) return {layer, rank, depth, id};
  return {layer, depth, id, 0};
}

std::vector<std::uint32_t> priority_ranks(const SchedGraph& graph, const Priority& priority,
                                          std::size_t heads) {
  std::vector<PriorityKey> keys;
  keys.reserve(graph.ops.size());
  for (const auto& op : graph.ops) keys.push_back(priority_key(op, priority, heads));
  std::vector<OpId> order(graph.ops.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](OpId a, OpId b) { return keys[a] < keys[b]; });
  std::vector<std::uint32_t> rank(graph.ops.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = static_cast<std::uint32_t>(i);
  return rank;
}

ModulePool::ModulePool(ModuleKind kind, std::size_t per_pe, std::size_t pe_count,
                       std::size_t ceiling)
    : kind_(kind), pe_count_(pe_count), ceiling_(ceiling), busy_(per_pe * pe_count, false) {
  if (pe_count == 0) throw ConfigError("module pool needs at least one PE");
  for (std::size_t m = 0; m < busy_.size(); ++m) free_.insert(free_.end(), m);
}

std::size_t ModulePool::acquire() {
  if (!can_acquire()) throw std::logic_error("no module available to acquire");
  const std::size_t m = *free_.begin();
  free_.erase(free_.begin());
  busy_[m] = true;
  ++active_;
  return m;
}

void ModulePool::release(std::size_t module) {
  if (!busy_.at(module)) throw std::logic_error("releasing an idle module");
  busy_[module] = false;
  free_.insert(module);
  --active_;
}

std::vector<Assignment> assign(std::vector<OpId> ready, const SchedGraph& graph,
                               const std::vector<std::uint32_t>& ranks,
                               std::array<ModulePool*, kModuleKinds> pools) {
  std::sort(ready.begin(), ready.end(), [&](OpId a, OpId b) { return ranks.at(a) < ranks.at(b); });
  std::vector<Assignment> out;
  for (OpId id : ready) {
    const auto kind = module_kind(graph.ops.at(id).kind);
    if (!kind) continue;
    ModulePool* pool = pools[static_cast<std::size_t>(*kind)];
    if (pool == nullptr || !pool->can_acquire()) continue;
    out.push_back({id, pool->acquire()});
  }
  return out;
}

Classification classify(const SchedGraph& graph, OpId id, const std::vector<OpStatus>& status,
                        const ResourceView& resources) {
  const OpStatus own = status.at(id);
  if (own == OpStatus::kIssued || own == OpStatus::kDone) return {own, std::nullopt};
  const SchedOp& op = graph.ops.at(id);
  bool all_issued = true;
  bool all_done = true;
  for (OpId d : op.deps) {
    all_issued = all_issued && (status[d] == OpStatus::kIssued || status[d] == OpStatus::kDone);
    all_done = all_done && status[d] == OpStatus::kDone;
  }
  switch (op.kind) {
    case SchedKind::kLoad: {
      const bool head = resources.is_fifo_head && resources.is_fifo_head(id);
      if (!head || !all_done) return {OpStatus::kWaiting, std::nullopt};
      if (resources.port_busy && resources.port_busy(id)) {
        return {OpStatus::kWaiting, StallReason::kMemBufferBusy};
      }
      if (resources.fits && !resources.fits(id)) {
        return {OpStatus::kWaiting, StallReason::kMemBufferFull};
      }
      return {OpStatus::kReady, std::nullopt};
    }
    case SchedKind::kStore: {
      if (!all_issued) return {OpStatus::kWaiting, std::nullopt};
      if (!all_done) return {OpStatus::kWaiting, StallReason::kMemStoreBeforeCompute};
      if (resources.port_busy && resources.port_busy(id)) {
        return {OpStatus::kWaiting, StallReason::kMemBufferBusy};
      }
      if (resources.fits && !resources.fits(id)) {
        return {OpStatus::kWaiting, StallReason::kMemBufferFull};
      }
      return {OpStatus::kReady, std::nullopt};
    }
    default: {
      if (!all_issued) return {OpStatus::kWaiting, std::nullopt};
      if (!all_done) return {OpStatus::kWaiting, StallReason::kComputeOperandMissing};
      const ModuleKind kind = *module_kind(op.kind);
      if (resources.module_available && !resources.module_available(kind)) {
        return {OpStatus::kWaiting, StallReason::kComputeNoModule};
      }
      return {OpStatus::kReady, std::nullopt};
    }
  }
}

std::uint64_t evict(const SchedGraph& graph, const std::vector<std::size_t>& pending_readers,
                    std::vector<bool>& resident, const std::vector<std::uint64_t>& tile_bytes,
                    arch::BufferKind buffer) {
  std::uint64_t freed = 0;
  for (const StorageTile& t : graph.tiles) {
    if (t.buffer != buffer || t.pinned || !resident.at(t.id)) continue;
    if (pending_readers.at(t.id) != 0) continue;
    resident[t.id] = false;
    freed += tile_bytes.at(t.id);
  }
  return freed;
}

std::vector<bool> power_gate(const ModulePool& pool) {
  std::vector<bool> gated(pool.size());
  for (std::size_t m = 0; m < pool.size(); ++m) gated[m] = !pool.busy(m);
  return gated;
}

}  // namespace acceltran::sched
