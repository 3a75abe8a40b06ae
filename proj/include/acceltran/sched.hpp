#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string_view>
#include <vector>

#include "acceltran/arch.hpp"
#include "acceltran/model.hpp"
#include "acceltran/tiling.hpp"

namespace acceltran::sched {

using OpId = std::uint32_t;
using TileId = std::uint32_t;
inline constexpr OpId kNoOp = std::numeric_limits<OpId>::max();

enum class SchedKind { kLoad, kMatmulTile, kSoftmaxRows, kLayerNormRows, kStore };
std::string_view to_string(SchedKind kind);

enum class ModuleKind : std::size_t { kMacLane = 0, kSoftmax = 1, kLayerNorm = 2 };
inline constexpr std::size_t kModuleKinds = 3;
std::string_view to_string(ModuleKind kind);
std::optional<ModuleKind> module_kind(SchedKind kind);

enum class StallReason : std::size_t {
  kComputeNoModule = 0,
  kComputeOperandMissing = 1,
  kMemBufferBusy = 2,
  kMemBufferFull = 3,
  kMemStoreBeforeCompute = 4,
};
inline constexpr std::size_t kStallReasons = 5;
std::string_view to_string(StallReason reason);
bool is_compute_stall(StallReason reason);

enum class OpStatus { kWaiting, kReady, kIssued, kDone };
std::string_view to_string(OpStatus status);

/// A block of one tensor that moves and is evicted as a unit.
struct StorageTile {
  TileId id = 0;
  model::TensorId tensor = 0;
  std::size_t b0 = 0, r0 = 0, c0 = 0;
  std::size_t eb = 0, er = 0, ec = 0;
  arch::BufferKind buffer = arch::BufferKind::kActivation;
  bool pinned = false;
  OpId producer = kNoOp;  // load or store that makes it resident
  std::size_t readers = 0;  // compute ops that read it

  std::size_t elements() const { return eb * er * ec; }
};

/// Which operand of the parent node a read belongs to.
struct TileRead {
  TileId tile = 0;
  std::size_t operand = 0;  // index into OpNode::operands
};

struct SchedOp {
  OpId id = 0;
  SchedKind kind = SchedKind::kLoad;
  model::NodeId node = 0;
  int layer = -1;
  int head = -1;
  std::size_t depth = 0;
  std::size_t seq = 0;  // position among the ops of the same node

  tiling::TiledOp mm;                    // matmul tiles
  std::size_t b0 = 0, eb = 0, r0 = 0, er = 0;  // row blocks (softmax / layer-norm)
  bool last_k = false;                   // matmul tile that finishes its output tile

  std::vector<OpId> deps;
  std::vector<OpId> users;
  std::vector<TileRead> reads;   // compute ops
  std::vector<TileId> writes;    // loads and stores
  OpId producer = kNoOp;         // stores: the compute op whose result they write
};

struct TensorTiling {
  TileId first = 0;
  std::size_t nb = 0, nr = 0, nc = 0;
  std::size_t tb = 1, tr = 1, tc = 1;
};

struct SchedGraph {
  tiling::TileSpec spec;
  tiling::Dataflow dataflow;
  std::vector<SchedOp> ops;
  std::vector<StorageTile> tiles;
  std::vector<TensorTiling> tensor_tiles;  // by tensor id
  std::vector<OpId> load_order;            // DMA FIFO, first use first
  OpId embedding_load = kNoOp;

  /// Storage tiles of `tensor` overlapping the half-open element box.
  std::vector<TileId> overlapping(model::TensorId tensor, std::size_t b0, std::size_t b1,
                                  std::size_t r0, std::size_t r1, std::size_t c0,
                                  std::size_t c1) const;
};

/// Expands the op graph into tile-level memory and compute operations.
SchedGraph build_sched_graph(const model::OpGraph& graph, const tiling::TileSpec& spec,
                             const tiling::Dataflow& df);

/// Head ranks; stagger rank r is issued ahead of rank r+1 at any depth.
struct Priority {
  bool stagger_enabled = true;
  std::vector<int> head_rank;  // by head index; empty means ascending head index
};

Priority make_priority(std::size_t heads, bool stagger);

using PriorityKey = std::array<std::int64_t, 4>;

/// Staggered: (layer, head rank, depth, id). Equal: (layer, depth, id), so heads advance
/// in lockstep. Ops outside attention heads take rank `heads`, after every head.
PriorityKey priority_key(const SchedOp& op, const Priority& priority, std::size_t heads);

/// Dense rank of every op under the priority order (0 = first).
std::vector<std::uint32_t> priority_ranks(const SchedGraph& graph, const Priority& priority,
                                          std::size_t heads);

/// Modules of one kind, indexed so that module m sits on PE m % pe_count.
class ModulePool {
 public:
  ModulePool(ModuleKind kind, std::size_t per_pe, std::size_t pe_count, std::size_t ceiling);

  ModuleKind kind() const { return kind_; }
  std::size_t size() const { return busy_.size(); }
  std::size_t active() const { return active_; }
  std::size_t ceiling() const { return ceiling_; }
  std::size_t pe_of(std::size_t module) const { return module % pe_count_; }
  bool busy(std::size_t module) const { return busy_.at(module); }
  bool can_acquire() const { return active_ < ceiling_ && !free_.empty(); }
  /// Lowest free module index; throws when none can be acquired.
  std::size_t acquire();
  void release(std::size_t module);

 private:
  ModuleKind kind_;
  std::size_t pe_count_;
  std::size_t ceiling_;
  std::size_t active_ = 0;
  std::vector<bool> busy_;
  std::set<std::size_t> free_;
};

struct Assignment {
  OpId op = 0;
  std::size_t module = 0;
};

/// Greedy matching of ready compute ops (any order) to free modules, best rank first.
std::vector<Assignment> assign(std::vector<OpId> ready, const SchedGraph& graph,
                               const std::vector<std::uint32_t>& ranks,
                               std::array<ModulePool*, kModuleKinds> pools);

/// Resource facts an op's readiness depends on, supplied by the engine.
struct ResourceView {
  std::function<bool(ModuleKind)> module_available;
  std::function<bool(OpId)> port_busy;       // store's write port or the DMA channel
  std::function<bool(OpId)> fits;            // buffer space for a load or store
  std::function<bool(OpId)> is_fifo_head;    // loads only
};

struct Classification {
  OpStatus status = OpStatus::kWaiting;
  std::optional<StallReason> stall;
};

/// Status of an unissued op: waiting (not yet eligible), ready, or stalled with a reason.
/// Issued and done ops are reported as such with no stall.
Classification classify(const SchedGraph& graph, OpId op, const std::vector<OpStatus>& status,
                        const ResourceView& resources);

/// Frees tiles whose readers are all done. Returns freed bytes; `resident` is updated.
std::uint64_t evict(const SchedGraph& graph, const std::vector<std::size_t>& pending_readers,
                    std::vector<bool>& resident, const std::vector<std::uint64_t>& tile_bytes,
                    arch::BufferKind buffer);

/// True for every module that is idle this cycle.
std::vector<bool> power_gate(const ModulePool& pool);

}  // namespace acceltran::sched
