#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>

#include "acceltran/arch.hpp"
#include "acceltran/error.hpp"
#include "acceltran/model.hpp"
#include "acceltran/sched.hpp"

using namespace acceltran;
using namespace acceltran::sched;

namespace {

model::ModelConfig small_tiny() {
  auto cfg = model::bert_tiny();
  cfg.seq_len = 16;
  cfg.batch = 1;
  return cfg;
}

struct Fixture {
  model::OpGraph graph = model::build_op_graph(small_tiny());
  SchedGraph g = build_sched_graph(graph, tiling::TileSpec{}, tiling::Dataflow{});
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

// First op of the given kind matching head/layer.
OpId find_op(const SchedGraph& g, SchedKind kind, int layer, int head) {
  for (const auto& op : g.ops) {
    if (op.kind == kind && op.layer == layer && op.head == head) return op.id;
  }
  throw std::runtime_error("no such op");
}

}  // namespace

TEST_CASE("sched graph is topologically ordered and consistent") {
  const auto& g = fixture().g;
  REQUIRE(!g.ops.empty());
  std::map<OpId, std::set<OpId>> users;
  for (const auto& op : g.ops) {
    for (OpId d : op.deps) {
      REQUIRE(d < op.id);
      users[d].insert(op.id);
    }
  }
  for (const auto& op : g.ops) {
    const std::set<OpId> u(op.users.begin(), op.users.end());
    CHECK(u == users[op.id]);
  }

  std::vector<std::size_t> readers(g.tiles.size(), 0);
  for (const auto& op : g.ops) {
    for (const auto& r : op.reads) ++readers.at(r.tile);
    if (op.kind == SchedKind::kLoad || op.kind == SchedKind::kStore) {
      REQUIRE(!op.writes.empty());
      for (TileId t : op.writes) CHECK(g.tiles.at(t).producer == op.id);
    } else {
      CHECK(op.writes.empty());
    }
  }
  for (const auto& t : g.tiles) {
    CHECK(t.readers == readers[t.id]);
    CHECK(t.producer != kNoOp);
  }
}

TEST_CASE("every load appears once in the DMA order") {
  const auto& g = fixture().g;
  std::set<OpId> loads;
  for (const auto& op : g.ops) {
    if (op.kind == SchedKind::kLoad) loads.insert(op.id);
  }
  const std::set<OpId> order(g.load_order.begin(), g.load_order.end());
  CHECK(order == loads);
  CHECK(g.load_order.size() == loads.size());
  REQUIRE(g.embedding_load != kNoOp);
  CHECK(g.ops[g.embedding_load].kind == SchedKind::kLoad);
}

TEST_CASE("matmul tile ops cover every MAC of their node") {
  const auto& f = fixture();
  std::map<model::NodeId, std::uint64_t> macs;
  for (const auto& op : f.g.ops) {
    if (op.kind == SchedKind::kMatmulTile) macs[op.node] += op.mm.macs();
  }
  std::size_t matmuls = 0;
  for (const auto& node : f.graph.nodes()) {
    if (node.kind != model::OpKind::kMatmul) continue;
    ++matmuls;
    const auto& lhs = f.graph.tensor(node.operands.at(0).tensor).shape;
    const auto& out = f.graph.tensor(node.output).shape;
    // out is B x X x Z and the reduction runs over the lhs columns
    const std::uint64_t expected = out.elements() * lhs.cols;
    CHECK(macs[node.id] == expected);
  }
  CHECK(matmuls > 0);
}

TEST_CASE("storage tiles of a tensor partition it") {
  const auto& f = fixture();
  std::map<model::TensorId, std::size_t> elems;
  for (const auto& t : f.g.tiles) elems[t.tensor] += t.elements();
  for (const auto& [tensor, n] : elems) {
    CHECK(n == f.graph.tensor(tensor).shape.elements());
  }
}

TEST_CASE("staggered priority puts head 0 ahead of head 1 at every depth") {
  const auto& g = fixture().g;
  const auto stag = priority_ranks(g, make_priority(2, true), 2);
  const auto eq = priority_ranks(g, make_priority(2, false), 2);

  std::uint32_t worst_h0 = 0, best_h1 = UINT32_MAX;
  for (const auto& op : g.ops) {
    if (op.layer != 0) continue;
    if (op.head == 0) worst_h0 = std::max(worst_h0, stag[op.id]);
    if (op.head == 1) best_h1 = std::min(best_h1, stag[op.id]);
  }
  CHECK(worst_h0 < best_h1);

  // equal priority: same depth, lower id first; shallower depth first
  for (const auto& a : g.ops) {
    if (a.layer != 0 || a.head < 0) continue;
    const auto& b = g.ops[find_op(g, a.kind, 0, 1 - a.head)];
    if (a.depth == b.depth) CHECK((eq[a.id] < eq[b.id]) == (a.id < b.id));
    if (a.depth < b.depth) CHECK(eq[a.id] < eq[b.id]);
  }
}

TEST_CASE("priority ranks are a permutation") {
  const auto& g = fixture().g;
  for (bool stagger : {true, false}) {
    auto r = priority_ranks(g, make_priority(2, stagger), 2);
    std::sort(r.begin(), r.end());
    for (std::size_t i = 0; i < r.size(); ++i) REQUIRE(r[i] == i);
  }
}

TEST_CASE("priority key of a non-head op ranks after all heads") {
  SchedOp op;
  op.layer = 1;
  op.head = -1;
  op.depth = 3;
  op.id = 9;
  const auto k = priority_key(op, make_priority(2, true), 2);
  CHECK(k == PriorityKey{1, 2, 3, 9});
  const auto e = priority_key(op, make_priority(2, false), 2);
  CHECK(e == PriorityKey{1, 3, 9, 0});
}

TEST_CASE("custom head rank reorders heads") {
  SchedOp op;
  op.layer = 0;
  op.head = 0;
  Priority p = make_priority(2, true);
  p.head_rank = {1, 0};
  CHECK(priority_key(op, p, 2)[1] == 1);
  op.head = 1;
  CHECK(priority_key(op, p, 2)[1] == 0);
}

TEST_CASE("module pool hands out lowest index and respects the ceiling") {
  ModulePool pool(ModuleKind::kSoftmax, 2, 4, 8);
  CHECK(pool.size() == 8);
  CHECK(pool.pe_of(5) == 1);
  CHECK(pool.acquire() == 0);
  CHECK(pool.acquire() == 1);
  pool.release(0);
  CHECK(pool.acquire() == 0);
  CHECK(pool.active() == 2);
  CHECK_THROWS_AS(pool.release(7), std::logic_error);

  const std::size_t ceil = arch::active_ceiling(8, true);
  CHECK(ceil == 4);
  ModulePool lp(ModuleKind::kMacLane, 2, 4, ceil);
  for (std::size_t i = 0; i < ceil; ++i) lp.acquire();
  CHECK_FALSE(lp.can_acquire());
  CHECK_THROWS_AS(lp.acquire(), std::logic_error);
  CHECK_THROWS_AS(ModulePool(ModuleKind::kMacLane, 1, 0, 1), ConfigError);
}

TEST_CASE("power gating follows module activity") {
  ModulePool pool(ModuleKind::kLayerNorm, 1, 3, 3);
  pool.acquire();
  const auto gated = power_gate(pool);
  CHECK(gated == std::vector<bool>{false, true, true});
  pool.release(0);
  CHECK(power_gate(pool) == std::vector<bool>{true, true, true});
}

TEST_CASE("assign gives best-ranked ready ops the free modules") {
  const auto& g = fixture().g;
  const auto ranks = priority_ranks(g, make_priority(2, true), 2);
  const OpId s0 = find_op(g, SchedKind::kSoftmaxRows, 0, 0);
  const OpId s1 = find_op(g, SchedKind::kSoftmaxRows, 0, 1);

  ModulePool sm(ModuleKind::kSoftmax, 1, 1, 1);
  std::array<ModulePool*, kModuleKinds> pools{nullptr, &sm, nullptr};
  const auto a = assign({s1, s0}, g, ranks, pools);
  REQUIRE(a.size() == 1);
  CHECK(a[0].op == s0);
  CHECK(a[0].module == 0);

  // nothing left to hand out
  CHECK(assign({s1}, g, ranks, pools).empty());
  // loads never take a module
  CHECK(assign({g.embedding_load}, g, ranks, pools).empty());
}

TEST_CASE("assign under equal priority picks the lower id at equal depth") {
  const auto& g = fixture().g;
  const auto ranks = priority_ranks(g, make_priority(2, false), 2);
  const OpId s0 = find_op(g, SchedKind::kSoftmaxRows, 0, 0);
  const OpId s1 = find_op(g, SchedKind::kSoftmaxRows, 0, 1);
  REQUIRE(g.ops[s0].depth == g.ops[s1].depth);
  ModulePool sm(ModuleKind::kSoftmax, 1, 1, 1);
  const auto a = assign({s1, s0}, g, ranks, {nullptr, &sm, nullptr});
  REQUIRE(a.size() == 1);
  CHECK(a[0].op == std::min(s0, s1));
}

TEST_CASE("classify separates waiting, stalled and ready ops") {
  const auto& g = fixture().g;
  std::vector<OpStatus> status(g.ops.size(), OpStatus::kWaiting);

  OpId mm = kNoOp;
  for (const auto& op : g.ops) {
    if (op.kind == SchedKind::kMatmulTile && op.deps.size() >= 2) {
      mm = op.id;
      break;
    }
  }
  REQUIRE(mm != kNoOp);
  const auto& deps = g.ops[mm].deps;

  bool modules = true;
  ResourceView rv;
  rv.module_available = [&](ModuleKind) { return modules; };

  CHECK(classify(g, mm, status, rv).status == OpStatus::kWaiting);
  CHECK_FALSE(classify(g, mm, status, rv).stall);

  for (OpId d : deps) status[d] = OpStatus::kIssued;
  auto c = classify(g, mm, status, rv);
  CHECK(c.status == OpStatus::kWaiting);
  CHECK(c.stall == StallReason::kComputeOperandMissing);

  for (OpId d : deps) status[d] = OpStatus::kDone;
  CHECK(classify(g, mm, status, rv).status == OpStatus::kReady);
  modules = false;
  c = classify(g, mm, status, rv);
  CHECK(c.stall == StallReason::kComputeNoModule);

  status[mm] = OpStatus::kIssued;
  c = classify(g, mm, status, rv);
  CHECK(c.status == OpStatus::kIssued);
  CHECK_FALSE(c.stall);
}

TEST_CASE("classify stores and loads") {
  const auto& g = fixture().g;
  std::vector<OpStatus> status(g.ops.size(), OpStatus::kWaiting);
  OpId st = kNoOp;
  for (const auto& op : g.ops) {
    if (op.kind == SchedKind::kStore) {
      st = op.id;
      break;
    }
  }
  REQUIRE(st != kNoOp);
  bool busy = false, fits = true;
  ResourceView rv;
  rv.port_busy = [&](OpId) { return busy; };
  rv.fits = [&](OpId) { return fits; };
  rv.is_fifo_head = [&](OpId id) { return id == g.load_order.front(); };

  for (OpId d : g.ops[st].deps) status[d] = OpStatus::kIssued;
  CHECK(classify(g, st, status, rv).stall == StallReason::kMemStoreBeforeCompute);
  for (OpId d : g.ops[st].deps) status[d] = OpStatus::kDone;
  CHECK(classify(g, st, status, rv).status == OpStatus::kReady);
  busy = true;
  CHECK(classify(g, st, status, rv).stall == StallReason::kMemBufferBusy);
  busy = false;
  fits = false;
  CHECK(classify(g, st, status, rv).stall == StallReason::kMemBufferFull);

  const OpId head = g.load_order.front();
  fits = true;
  for (OpId d : g.ops[head].deps) status[d] = OpStatus::kDone;
  CHECK(classify(g, head, status, rv).status == OpStatus::kReady);
  if (g.load_order.size() > 1) {
    const OpId second = g.load_order[1];
    const auto c = classify(g, second, status, rv);
    CHECK(c.status == OpStatus::kWaiting);
    CHECK_FALSE(c.stall);
  }
  fits = false;
  CHECK(classify(g, head, status, rv).stall == StallReason::kMemBufferFull);
}

TEST_CASE("evict frees only unpinned tiles with no pending readers") {
  const auto& g = fixture().g;
  std::vector<std::size_t> pending(g.tiles.size(), 1);
  std::vector<bool> resident(g.tiles.size(), true);
  std::vector<std::uint64_t> bytes(g.tiles.size(), 2048);

  CHECK(evict(g, pending, resident, bytes, arch::BufferKind::kActivation) == 0);

  TileId victim = 0;
  bool found = false;
  for (const auto& t : g.tiles) {
    if (t.buffer == arch::BufferKind::kActivation && !t.pinned) {
      victim = t.id;
      found = true;
      break;
    }
  }
  REQUIRE(found);
  pending[victim] = 0;
  CHECK(evict(g, pending, resident, bytes, arch::BufferKind::kWeight) == 0);
  CHECK(evict(g, pending, resident, bytes, arch::BufferKind::kActivation) == 2048);
  CHECK_FALSE(resident[victim]);
  // already gone
  CHECK(evict(g, pending, resident, bytes, arch::BufferKind::kActivation) == 0);

  for (const auto& t : g.tiles) {
    if (t.pinned) pending[t.id] = 0;
  }
  for (auto kind : {arch::BufferKind::kActivation, arch::BufferKind::kWeight}) {
    evict(g, pending, resident, bytes, kind);
  }
  for (const auto& t : g.tiles) {
    if (t.pinned) CHECK(resident[t.id]);
  }
}

TEST_CASE("stall reason classes") {
  CHECK(is_compute_stall(StallReason::kComputeNoModule));
  CHECK(is_compute_stall(StallReason::kComputeOperandMissing));
  CHECK_FALSE(is_compute_stall(StallReason::kMemBufferBusy));
  CHECK_FALSE(is_compute_stall(StallReason::kMemBufferFull));
  CHECK_FALSE(is_compute_stall(StallReason::kMemStoreBeforeCompute));
  CHECK(module_kind(SchedKind::kMatmulTile) == ModuleKind::kMacLane);
  CHECK(module_kind(SchedKind::kSoftmaxRows) == ModuleKind::kSoftmax);
  CHECK(module_kind(SchedKind::kLayerNormRows) == ModuleKind::kLayerNorm);
  CHECK_FALSE(module_kind(SchedKind::kLoad));
  CHECK_FALSE(module_kind(SchedKind::kStore));
}
