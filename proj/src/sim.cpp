#include "acceltran/sim.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "acceltran/error.hpp"

namespace acceltran::sim {

using numerics::FixedTensor;
using numerics::Raw;
using numerics::WideAcc;
using sched::ModuleKind;
using sched::OpId;
using sched::SchedKind;
using sched::StallReason;
using sched::TileId;

void validate(const SimOptions& opts) {
  if (opts.tau && opts.rho_target) throw ConfigError("set either tau or rho_target, not both");
  if (opts.tau && !(*opts.tau >= 0)) throw ConfigError("tau must be >= 0");
  if (opts.rho_target) {
    if (!(*opts.rho_target >= 0 && *opts.rho_target <= 1)) {
      throw ConfigError("rho_target must lie in [0, 1]");
    }
    if (!opts.profile) throw ConfigError("rho_target needs a sparsity profile");
    sparsity::validate_profile(*opts.profile);
  }
  if (opts.max_cycles == 0) throw ConfigError("max_cycles must be > 0");
  tiling::validate(opts.tile_spec);
}

std::string_view to_string(EnergyComponent c) {
  switch (c) {
    case EnergyComponent::kMac: return "mac";
    case EnergyComponent::kActBuffer: return "act_buffer";
    case EnergyComponent::kWtBuffer: return "wt_buffer";
    case EnergyComponent::kMaskBuffer: return "mask_buffer";
    case EnergyComponent::kMainMemory: return "main_memory";
    case EnergyComponent::kSoftmax: return "softmax";
    case EnergyComponent::kLayerNorm: return "layernorm";
    case EnergyComponent::kDynaTran: return "dynatran";
    case EnergyComponent::kSparsity: return "sparsity";
    case EnergyComponent::kLeakage: return "leakage";
  }
  return "?";
}

std::uint64_t Metrics::compute_stalls() const {
  return stalls[static_cast<std::size_t>(StallReason::kComputeNoModule)] +
         stalls[static_cast<std::size_t>(StallReason::kComputeOperandMissing)];
}

std::uint64_t Metrics::memory_stalls() const {
  return stalls[static_cast<std::size_t>(StallReason::kMemBufferBusy)] +
         stalls[static_cast<std::size_t>(StallReason::kMemBufferFull)] +
         stalls[static_cast<std::size_t>(StallReason::kMemStoreBeforeCompute)];
}

std::int64_t Metrics::total_energy_fj() const {
  std::int64_t sum = 0;
  for (auto e : energy_fj) sum += e;
  return sum;
}

double Metrics::energy_pj(EnergyComponent c) const {
  return static_cast<double>(energy_fj[static_cast<std::size_t>(c)]) / 1000.0;
}

std::optional<double> resolve_tau(const SimOptions& opts) {
  if (opts.tau) return opts.tau;
  if (opts.rho_target) return sparsity::threshold_lookup(*opts.profile, *opts.rho_target);
  return std::nullopt;
}

sparsity::PruneSettings prune_settings(const SimOptions& opts) {
  sparsity::PruneSettings s;
  s.tau = resolve_tau(opts);
  s.prune_weights = opts.prune_weights;
  s.prune_matmul_activations = opts.prune_matmul_activations;
  s.prune_softmax_input = opts.prune_softmax_input;
  s.prune_layernorm_input = opts.prune_layernorm_input;
  return s;
}

namespace {

constexpr OpId kWake = sched::kNoOp;

std::uint64_t bytes_for(std::uint64_t nnz, int bits) {
  return (nnz * static_cast<std::uint64_t>(bits) + 7) / 8;
}

std::uint64_t mask_bytes_for(std::uint64_t elements) { return (elements + 7) / 8; }

class Engine {
 public:
  Engine(const model::ModelConfig& cfg, const arch::HardwareConfig& hw,
         const arch::EnergyModel& energy, const SimOptions& opts)
      : cfg_(model::validate_config(cfg)),
        hw_(arch::validate(hw)),
        energy_(arch::validate(energy)),
        opts_(opts),
        fmt_(hw_.fmt),
        graph_(model::build_op_graph(cfg_)),
        g_(sched::build_sched_graph(graph_, opts.tile_spec, opts.dataflow)),
        act_(arch::BufferKind::kActivation, hw_.act_buffer_bytes),
        wt_(arch::BufferKind::kWeight, hw_.wt_buffer_bytes),
        mask_(arch::BufferKind::kMask, hw_.mask_buffer_bytes),
        pools_{sched::ModulePool(ModuleKind::kMacLane, hw_.lanes_per_pe, hw_.pe_count,
                                 arch::active_ceiling(hw_.lanes_per_pe * hw_.pe_count, hw_.lp_mode)),
               sched::ModulePool(ModuleKind::kSoftmax, hw_.softmax_per_pe, hw_.pe_count,
                                 arch::active_ceiling(hw_.softmax_per_pe * hw_.pe_count, hw_.lp_mode)),
               sched::ModulePool(ModuleKind::kLayerNorm, hw_.layernorm_per_pe, hw_.pe_count,
                                 arch::active_ceiling(hw_.layernorm_per_pe * hw_.pe_count,
                                                      hw_.lp_mode))} {
    validate(opts_);
    settings_ = prune_settings(opts_);
    tau_raw_ = settings_.tau ? sparsity::threshold_raw(*settings_.tau, fmt_) : 0;
    weights_ = numerics::generate_weights(graph_, cfg_, fmt_, opts_.seed);
    tokens_ = numerics::generate_tokens(cfg_, opts_.seed);
    ranks_ = sched::priority_ranks(g_, sched::make_priority(cfg_.heads, opts_.stagger), cfg_.heads);

    pruned_.resize(graph_.nodes().size());
    for (const auto& node : graph_.nodes()) {
      for (const auto& operand : node.operands) {
        pruned_[node.id].push_back(sparsity::operand_pruned(graph_, node, operand, settings_));
      }
    }
    const std::size_t n = g_.ops.size();
    status_.assign(n, sched::OpStatus::kWaiting);
    deps_issued_.assign(n, 0);
    deps_done_.assign(n, 0);
    records_.assign(n, OpRecord{});
    pending_.resize(g_.tiles.size());
    for (const auto& t : g_.tiles) pending_[t.id] = t.readers;
    resident_.assign(g_.tiles.size(), false);
    value_bytes_.assign(g_.tiles.size(), 0);
    tile_mask_bytes_.assign(g_.tiles.size(), 0);
    acts_.resize(graph_.tensors().size());
    for (const auto& t : graph_.tensors()) {
      if (t.role == model::TensorRole::kActivation) acts_[t.id] = FixedTensor::zeros(t.shape, fmt_);
    }
    port_free_.assign(hw_.pe_count, 0);
    dyn_free_.assign(hw_.pe_count, 0);
    store_queues_.resize(hw_.pe_count);
    lane_last_.resize(pools_[0].size());
    check_capacity();
  }

  SimResult run() {
    SimResult result;
    std::uint64_t t = 0;
    std::size_t done = 0;
    if (!g_.load_order.empty()) make_eligible(g_.load_order.front(), 0);
    // ops with no deps at all (none in practice besides loads) start eligible
    for (const auto& op : g_.ops) {
      if (op.kind != SchedKind::kLoad && op.deps.empty()) make_eligible(op.id, 0);
    }
    while (true) {
      while (!events_.empty() && events_.top().first == t) {
        const OpId id = events_.top().second;
        events_.pop();
        if (id != kWake) {
          complete(id, t);
          ++done;
        }
      }
      issue_pass(t);
      if (done == g_.ops.size()) break;
      if (events_.empty()) throw DeadlockError(deadlock_report(t));
      const std::uint64_t next = events_.top().first;
      account(t, next);
      t = next;
      if (t > opts_.max_cycles) {
        throw DeadlockError("simulation exceeded max_cycles (" + std::to_string(opts_.max_cycles) +
                            ")\n" + deadlock_report(t));
      }
    }
    finish(t, result);
    return result;
  }

 private:
  // ---- setup -----------------------------------------------------------------

  void check_capacity() {
    // a single load that can never fit would deadlock; report it as a configuration problem
    for (OpId id : g_.load_order) {
      std::uint64_t wt = 0, act = 0, mask = 0;
      for (TileId tile : g_.ops[id].writes) {
        const auto& st = g_.tiles[tile];
        const std::uint64_t elements = st.elements();
        const std::uint64_t nnz = st.buffer == arch::BufferKind::kWeight ? count_nnz(tile) : elements;
        (st.buffer == arch::BufferKind::kWeight ? wt : act) += bytes_for(nnz, fmt_.total_bits());
        mask += mask_bytes_for(elements);
      }
      if (wt > hw_.wt_buffer_bytes || act > hw_.act_buffer_bytes || mask > hw_.mask_buffer_bytes) {
        throw ConfigError("load of " + graph_.tensor(g_.tiles[g_.ops[id].writes.front()].tensor).name +
                          " needs more on-chip buffer than configured");
      }
    }
  }

  const FixedTensor& source(model::TensorId id) const {
    if (graph_.tensor(id).role == model::TensorRole::kActivation) return *acts_[id];
    return weights_.at(id);
  }

  std::uint64_t count_nnz(TileId tile) const {
    const auto& st = g_.tiles[tile];
    const FixedTensor& src = source(st.tensor);
    std::uint64_t nnz = 0;
    for (std::size_t b = st.b0; b < st.b0 + st.eb; ++b)
      for (std::size_t r = st.r0; r < st.r0 + st.er; ++r) {
        const Raw* row = src.raw.data() + src.index(b, r, st.c0);
        for (std::size_t c = 0; c < st.ec; ++c) nnz += row[c] != 0;
      }
    return nnz;
  }

  // ---- bookkeeping -------------------------------------------------------------

  void charge(OpId op, EnergyComponent c, double pj) {
    const std::int64_t fj = arch::to_fj(pj);
    metrics_.energy_fj[static_cast<std::size_t>(c)] += fj;
    if (op != sched::kNoOp) records_[op].energy_fj += fj;
  }

  void trace_event(std::uint64_t t, OpId op, EventKind kind, StallReason reason = {}) {
    if (opts_.trace) trace_.schedule.push_back({t, op, kind, reason});
  }

  void note_stall(std::uint64_t t, OpId op, StallReason reason) {
    if (!opts_.trace) return;
    auto it = last_reason_.find(op);
    if (it != last_reason_.end() && it->second == reason) return;
    last_reason_[op] = reason;
    trace_event(t, op, EventKind::kStall, reason);
  }

  void make_eligible(OpId id, std::uint64_t t) {
    records_[id].eligible = t;
    const SchedOp& op = g_.ops[id];
    const bool ready = deps_done_[id] == op.deps.size();
    switch (op.kind) {
      case SchedKind::kLoad: break;  // FIFO head, handled in the issue pass
      case SchedKind::kStore:
        if (ready) {
          enqueue_store(id);
        } else {
          ++store_before_compute_;
          note_stall(t, id, StallReason::kMemStoreBeforeCompute);
        }
        break;
      default:
        if (ready) {
          make_ready(id, t);
        } else {
          ++operand_missing_;
          note_stall(t, id, StallReason::kComputeOperandMissing);
        }
        break;
    }
  }

  void make_ready(OpId id, std::uint64_t t) {
    status_[id] = sched::OpStatus::kReady;
    const SchedOp& op = g_.ops[id];
    if (op.kind == SchedKind::kStore) {
      enqueue_store(id);
      return;
    }
    const auto kind = static_cast<std::size_t>(*sched::module_kind(op.kind));
    ready_[kind].insert({ranks_[id], id});
    if (opts_.trace) newly_ready_.push_back(id);
    (void)t;
  }

  std::size_t store_pe(OpId store) const {
    const OpId producer = g_.ops[store].producer;
    const SchedOp& p = g_.ops[producer];
    const auto kind = static_cast<std::size_t>(*sched::module_kind(p.kind));
    return pools_[kind].pe_of(records_[producer].module);
  }

  void enqueue_store(OpId id) {
    status_[id] = sched::OpStatus::kReady;
    const std::size_t pe = store_pe(id);
    store_queues_[pe].insert({ranks_[id], id});
    store_pes_.insert(pe);
  }

  void on_issue(OpId id, std::uint64_t t, std::uint64_t end, std::uint32_t module) {
    status_[id] = sched::OpStatus::kIssued;
    records_[id].issue = t;
    records_[id].end = end;
    records_[id].module = module;
    events_.push({end, id});
    trace_event(t, id, EventKind::kIssue);
    if (opts_.trace) last_reason_.erase(id);
    for (OpId user : g_.ops[id].users) {
      if (++deps_issued_[user] == g_.ops[user].deps.size()) make_eligible(user, t);
    }
  }

  void complete(OpId id, std::uint64_t t) {
    status_[id] = sched::OpStatus::kDone;
    trace_event(t, id, EventKind::kComplete);
    const SchedOp& op = g_.ops[id];
    if (auto kind = sched::module_kind(op.kind)) {
      pools_[static_cast<std::size_t>(*kind)].release(records_[id].module);
      for (const auto& read : op.reads) {
        if (--pending_[read.tile] == 0) release_tile(read.tile, t);
      }
    } else {
      for (TileId tile : op.writes) {
        resident_[tile] = true;
        if (pending_[tile] == 0 && !g_.tiles[tile].pinned) release_tile(tile, t);
      }
    }
    for (OpId user : op.users) {
      if (++deps_done_[user] != g_.ops[user].deps.size()) continue;
      if (deps_issued_[user] != g_.ops[user].deps.size()) continue;
      // user was eligible and waiting on this op
      if (g_.ops[user].kind == SchedKind::kStore) {
        --store_before_compute_;
      } else {
        --operand_missing_;
      }
      make_ready(user, t);
    }
  }

  void release_tile(TileId tile, std::uint64_t t) {
    const auto& st = g_.tiles[tile];
    if (st.pinned || !resident_[tile]) return;
    resident_[tile] = false;
    (st.buffer == arch::BufferKind::kWeight ? wt_ : act_).release(value_bytes_[tile]);
    mask_.release(tile_mask_bytes_[tile]);
    trace_event(t, tile, EventKind::kEvict);
  }

  // ---- issue -------------------------------------------------------------------

  void issue_pass(std::uint64_t t) {
    for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
      auto& queue = ready_[k];
      while (!queue.empty() && pools_[k].can_acquire()) {
        const OpId id = queue.begin()->second;
        queue.erase(queue.begin());
        const std::size_t module = pools_[k].acquire();
        issue_compute(id, module, t);
      }
    }
    issue_stores(t);
    issue_loads(t);
    if (opts_.trace) {
      for (OpId id : newly_ready_) {
        if (status_[id] == sched::OpStatus::kReady) note_stall(t, id, StallReason::kComputeNoModule);
      }
      newly_ready_.clear();
      for (std::size_t pe : store_pes_) {
        const StallReason r = port_free_[pe] > t ? StallReason::kMemBufferBusy : StallReason::kMemBufferFull;
        for (const auto& entry : store_queues_[pe]) note_stall(t, entry.second, r);
      }
      if (fifo_pos_ < g_.load_order.size()) {
        const StallReason r = dma_free_ > t ? StallReason::kMemBufferBusy : StallReason::kMemBufferFull;
        note_stall(t, g_.load_order[fifo_pos_], r);
      }
    }
  }

  void issue_stores(std::uint64_t t) {
    for (auto it = store_pes_.begin(); it != store_pes_.end();) {
      const std::size_t pe = *it;
      auto& queue = store_queues_[pe];
      if (port_free_[pe] <= t) {
        const OpId id = queue.begin()->second;
        if (try_issue_store(id, pe, t)) queue.erase(queue.begin());
      }
      it = queue.empty() ? store_pes_.erase(it) : std::next(it);
    }
  }

  bool try_issue_store(OpId id, std::size_t pe, std::uint64_t t) {
    const TileId tile = g_.ops[id].writes.front();
    const auto& st = g_.tiles[tile];
    const std::uint64_t vb = bytes_for(count_nnz(tile), fmt_.total_bits());
    const std::uint64_t mb = mask_bytes_for(st.elements());
    if (!act_.fits(vb) || !mask_.fits(mb)) return false;
    act_.allocate(vb);
    mask_.allocate(mb);
    value_bytes_[tile] = vb;
    tile_mask_bytes_[tile] = mb;
    const auto act_cost = arch::buffer_model(arch::BufferKind::kActivation, arch::BufferOp::kWrite,
                                             vb, hw_.port_width_bytes, energy_);
    const auto mask_cost = arch::buffer_model(arch::BufferKind::kMask, arch::BufferOp::kWrite, mb,
                                              hw_.port_width_bytes, energy_);
    charge(id, EnergyComponent::kActBuffer, act_cost.energy_pj);
    charge(id, EnergyComponent::kMaskBuffer, mask_cost.energy_pj);
    const std::uint64_t busy = std::max<std::uint64_t>({1, act_cost.busy_cycles, mask_cost.busy_cycles});
    port_free_[pe] = t + busy;
    on_issue(id, t, t + busy, static_cast<std::uint32_t>(pe));
    return true;
  }

  void issue_loads(std::uint64_t t) {
    while (fifo_pos_ < g_.load_order.size() && dma_free_ <= t) {
      const OpId id = g_.load_order[fifo_pos_];
      const SchedOp& op = g_.ops[id];
      std::uint64_t wt = 0, act = 0, mask = 0, moved = 0;
      std::vector<std::pair<std::uint64_t, std::uint64_t>> sizes;
      for (TileId tile : op.writes) {
        const auto& st = g_.tiles[tile];
        const bool weight = st.buffer == arch::BufferKind::kWeight;
        const std::uint64_t nnz = weight ? count_nnz(tile) : 0;
        sizes.push_back({bytes_for(nnz, fmt_.total_bits()), mask_bytes_for(st.elements())});
        (weight ? wt : act) += sizes.back().first;
        mask += sizes.back().second;
        if (weight) moved += sizes.back().first + sizes.back().second;
      }
      // embedding gather output is sized once its values exist
      const bool embedding = id == g_.embedding_load;
      if (embedding) {
        compute_embedding();
        act = 0;
        for (std::size_t i = 0; i < op.writes.size(); ++i) {
          const auto& st = g_.tiles[op.writes[i]];
          if (st.buffer != arch::BufferKind::kActivation) continue;
          sizes[i].first = bytes_for(count_nnz(op.writes[i]), fmt_.total_bits());
          act += sizes[i].first;
        }
      }
      if (!wt_.fits(wt) || !act_.fits(act) || !mask_.fits(mask)) return;
      wt_.allocate(wt);
      act_.allocate(act);
      mask_.allocate(mask);
      std::uint64_t mask_written = 0;
      for (std::size_t i = 0; i < op.writes.size(); ++i) {
        value_bytes_[op.writes[i]] = sizes[i].first;
        tile_mask_bytes_[op.writes[i]] = sizes[i].second;
        mask_written += sizes[i].second;
      }
      charge(id, EnergyComponent::kMainMemory, static_cast<double>(moved) * energy_.mem_pj_per_byte);
      charge(id, EnergyComponent::kWtBuffer, static_cast<double>(wt) * energy_.buffer_wr_pj_per_byte);
      charge(id, EnergyComponent::kActBuffer, static_cast<double>(act) * energy_.buffer_wr_pj_per_byte);
      charge(id, EnergyComponent::kMaskBuffer,
             static_cast<double>(mask_written) * energy_.mask_wr_pj_per_byte);
      const std::uint64_t stream = arch::mem_stream_cycles(moved, hw_);
      dma_free_ = t + std::max<std::uint64_t>(stream, 1);
      const std::uint64_t end = t + std::max<std::uint64_t>(stream + hw_.latency_cycles(), 1);
      if (dma_free_ < end) events_.push({dma_free_, kWake});
      ++fifo_pos_;
      on_issue(id, t, end, 0);
      if (fifo_pos_ < g_.load_order.size()) make_eligible(g_.load_order[fifo_pos_], t);
    }
  }

  void compute_embedding() {
    const model::OpNode& node = graph_.node(g_.ops[g_.embedding_load].node);
    const model::Shape s = graph_.tensor(node.output).shape;
    acts_[node.output] = numerics::embed_tokens(weights_.at(node.operands.at(0).tensor),
                                                weights_.at(node.operands.at(1).tensor), tokens_,
                                                s.batch, s.rows);
  }

  // ---- compute -----------------------------------------------------------------

  struct OperandCost {
    std::uint64_t value_bytes = 0;
    std::uint64_t mask_bytes = 0;
    std::uint64_t elements = 0;
    std::size_t tiles = 0;
    bool from_weight = false;
  };

  // Read cost of one operand region plus the DynaTran invocations it triggers.
  void charge_operand_read(OpId id, std::size_t operand, std::size_t lane_slot,
                           std::uint32_t module, bool track_reuse, std::vector<TileId>& prune) {
    const SchedOp& op = g_.ops[id];
    std::vector<TileId> tiles;
    for (const auto& r : op.reads) {
      if (r.operand == operand) tiles.push_back(r.tile);
    }
    if (tiles.empty()) return;
    if (track_reuse) {
      auto& last = lane_last_[module][lane_slot];
      if (last == tiles) return;  // operand tiles still in the lane registers
      last = tiles;
    }
    const model::TensorId tensor = g_.tiles[tiles.front()].tensor;
    const bool weight = graph_.tensor(tensor).role != model::TensorRole::kActivation;
    std::uint64_t vb = 0, mb = 0;
    for (TileId tile : tiles) {
      vb += value_bytes_[tile];
      mb += tile_mask_bytes_[tile];
    }
    charge(id, weight ? EnergyComponent::kWtBuffer : EnergyComponent::kActBuffer,
           static_cast<double>(vb) * energy_.buffer_rd_pj_per_byte);
    charge(id, EnergyComponent::kMaskBuffer, static_cast<double>(mb) * energy_.mask_rd_pj_per_byte);
    if (!pruned_[op.node][operand]) return;
    std::uint64_t elements = 0;
    for (TileId tile : tiles) elements += g_.tiles[tile].elements();
    charge(id, EnergyComponent::kDynaTran, static_cast<double>(elements) * energy_.dynatran_cmp_pj);
    prune.insert(prune.end(), tiles.begin(), tiles.end());
  }

  // Reserves back-to-back single-cycle DynaTran slots; returns the cycle compute can start.
  std::uint64_t run_dynatran(OpId id, std::size_t pe, const std::vector<TileId>& tiles,
                             std::uint64_t t) {
    if (tiles.empty()) return t;
    const auto& spec = opts_.tile_spec;
    std::uint64_t c = std::max(t, dyn_free_[pe]);
    for (TileId tile : tiles) {
      const auto& st = g_.tiles[tile];
      const std::uint64_t d = arch::dynatran_module_cycles(st.eb, st.er, st.ec, spec.tb, spec.tx, spec.ty);
      if (opts_.trace) trace_.dynatran.push_back({static_cast<std::uint32_t>(pe), c, c + d, id});
      c += d;
    }
    dyn_free_[pe] = c;
    metrics_.dynatran_invocations += tiles.size();
    return c;
  }

  void issue_compute(OpId id, std::size_t module, std::uint64_t t) {
    const SchedOp& op = g_.ops[id];
    const auto kind = static_cast<std::size_t>(*sched::module_kind(op.kind));
    const std::size_t pe = pools_[kind].pe_of(module);
    std::vector<TileId> prune;
    std::uint64_t cycles = 0;
    const auto m32 = static_cast<std::uint32_t>(module);
    if (op.kind == SchedKind::kMatmulTile) {
      charge_operand_read(id, 0, 0, m32, true, prune);
      charge_operand_read(id, 1, 1, m32, true, prune);
      cycles = exec_matmul(id);
    } else {
      const model::OpNode& node = graph_.node(op.node);
      for (std::size_t o = 0; o < node.operands.size(); ++o) {
        charge_operand_read(id, o, 0, m32, false, prune);
      }
      cycles = op.kind == SchedKind::kSoftmaxRows ? exec_softmax(id) : exec_layernorm(id);
    }
    const std::uint64_t start = run_dynatran(id, pe, prune, t);
    const std::uint64_t end = std::max(start + cycles, t + 1);
    on_issue(id, t, end, m32);
  }

  // Gathers a (rows x cols) block of `tensor` at batch b, optionally transposed, and prunes it.
  void gather(std::vector<Raw>& out, model::TensorId tensor, std::size_t b, std::size_t r0,
              std::size_t rows, std::size_t c0, std::size_t cols, bool transposed, bool prune) {
    const FixedTensor& src = source(tensor);
    const std::size_t bb = src.shape.batch == 1 ? 0 : b;
    out.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        out[r * cols + c] = transposed ? src.at(bb, c0 + c, r0 + r) : src.at(bb, r0 + r, c0 + c);
      }
    if (prune) {
      for (Raw& v : out) {
        if (std::abs(static_cast<std::int64_t>(v)) < tau_raw_) v = 0;
      }
    }
  }

  std::uint64_t exec_matmul(OpId id) {
    const SchedOp& op = g_.ops[id];
    const tiling::TiledOp& mm = op.mm;
    const model::OpNode& node = graph_.node(op.node);
    const model::TensorId lhs = node.operands[0].tensor;
    const model::TensorId rhs = node.operands[1].tensor;
    const std::uint64_t key = (static_cast<std::uint64_t>(op.node) << 40) |
                              (static_cast<std::uint64_t>(mm.idx.b) << 27) |
                              (static_cast<std::uint64_t>(mm.idx.i) << 14) | mm.idx.j;
    auto& acc = partial_[key];
    if (acc.empty()) acc.assign(mm.eb * mm.ex * mm.ez, 0);
    std::uint64_t n_eff = 0;
    std::vector<Raw> w, a;
    for (std::size_t b = 0; b < mm.eb; ++b) {
      gather(w, lhs, mm.b0 + b, mm.i0, mm.ex, mm.k0, mm.ey, false, pruned_[node.id][0]);
      if (node.transpose_rhs) {
        gather(a, rhs, mm.b0 + b, mm.k0, mm.ey, mm.j0, mm.ez, true, pruned_[node.id][1]);
      } else {
        gather(a, rhs, mm.b0 + b, mm.k0, mm.ey, mm.j0, mm.ez, false, pruned_[node.id][1]);
      }
      WideAcc* cell = acc.data() + b * mm.ex * mm.ez;
      if (opts_.compressed_datapath) {
        FixedTensor wt{{1, mm.ex, mm.ey}, fmt_, w};
        FixedTensor at{{1, mm.ey, mm.ez}, fmt_, a};
        const auto r = sparsity::sparse_tile_mac(sparsity::compress(wt), sparsity::compress(at));
        for (std::size_t e = 0; e < r.partial.size(); ++e) cell[e] += r.partial[e];
        n_eff += r.effectual_macs;
      } else {
        // zero operands are skipped, so the count is the common-mask popcount
        for (std::size_t i = 0; i < mm.ex; ++i)
          for (std::size_t k = 0; k < mm.ey; ++k) {
            const Raw wv = w[i * mm.ey + k];
            if (wv == 0) continue;
            const Raw* arow = a.data() + k * mm.ez;
            WideAcc* crow = cell + i * mm.ez;
            for (std::size_t j = 0; j < mm.ez; ++j) {
              if (arow[j] == 0) continue;
              crow[j] += static_cast<WideAcc>(static_cast<std::int64_t>(wv) * arow[j]);
              ++n_eff;
            }
          }
      }
    }
    const std::uint64_t full = mm.macs();
    metrics_.macs_total += full;
    metrics_.macs_skipped += full - n_eff;
    const std::uint64_t in_elems = mm.eb * (mm.ex * mm.ey + mm.ey * mm.ez);
    charge(id, EnergyComponent::kMac, static_cast<double>(n_eff) * energy_.mac_pj);
    charge(id, EnergyComponent::kSparsity, static_cast<double>(in_elems) * energy_.sparsity_elem_pj);
    if (op.last_k) {
      FixedTensor& out = *acts_[node.output];
      for (std::size_t b = 0; b < mm.eb; ++b)
        for (std::size_t i = 0; i < mm.ex; ++i)
          for (std::size_t j = 0; j < mm.ez; ++j) {
            Raw v = numerics::round_accumulator(acc[(b * mm.ex + i) * mm.ez + j], fmt_);
            if (node.fused_gelu) v = numerics::gelu(v, fmt_);
            out.at(mm.b0 + b, mm.i0 + i, mm.j0 + j) = v;
          }
      charge(id, EnergyComponent::kSparsity,
             static_cast<double>(mm.eb * mm.ex * mm.ez) * energy_.sparsity_elem_pj);
      partial_.erase(key);
    }
    const std::size_t m = hw_.multipliers_per_lane;
    const std::uint64_t work = opts_.sparsity_aware ? n_eff
                                                    : opts_.tile_spec.tb * opts_.tile_spec.tx *
                                                          opts_.tile_spec.tk() * opts_.tile_spec.ty;
    return arch::mac_lane_cycles(work, m);
  }

  std::uint64_t exec_softmax(OpId id) {
    const SchedOp& op = g_.ops[id];
    const model::OpNode& node = graph_.node(op.node);
    const model::TensorId in_t = node.operands.at(0).tensor;
    const std::size_t cols = graph_.tensor(in_t).shape.cols;
    FixedTensor& out = *acts_[node.output];
    std::vector<Raw> row;
    std::uint64_t effectual = 0;
    for (std::size_t b = op.b0; b < op.b0 + op.eb; ++b)
      for (std::size_t r = op.r0; r < op.r0 + op.er; ++r) {
        gather(row, in_t, b, r, 1, 0, cols, false, pruned_[node.id][0]);
        for (Raw v : row) effectual += v != 0;
        const auto y = numerics::softmax_row(row, node.softmax_scale, fmt_);
        std::copy(y.begin(), y.end(), out.raw.begin() + static_cast<std::ptrdiff_t>(out.index(b, r, 0)));
      }
    const std::uint64_t elements = op.eb * op.er * cols;
    charge(id, EnergyComponent::kSoftmax, static_cast<double>(effectual) * energy_.softmax_elem_pj);
    charge(id, EnergyComponent::kSparsity, static_cast<double>(2 * elements) * energy_.sparsity_elem_pj);
    return arch::softmax_cycles(op.eb * op.er, cols, hw_.multipliers_per_lane, hw_.softmax_passes,
                                hw_.nonlinear_fixed_cycles);
  }

  std::uint64_t exec_layernorm(OpId id) {
    const SchedOp& op = g_.ops[id];
    const model::OpNode& node = graph_.node(op.node);
    const std::size_t cols = graph_.tensor(node.output).shape.cols;
    FixedTensor& out = *acts_[node.output];
    std::vector<Raw> x(cols), part;
    const FixedTensor* params = nullptr;
    std::uint64_t effectual = 0;
    for (std::size_t b = op.b0; b < op.b0 + op.eb; ++b)
      for (std::size_t r = op.r0; r < op.r0 + op.er; ++r) {
        std::fill(x.begin(), x.end(), 0);
        std::size_t col = 0;
        for (std::size_t o = 0; o < node.operands.size(); ++o) {
          const model::Operand& operand = node.operands[o];
          if (operand.role == model::OperandRole::kParams) {
            params = &source(operand.tensor);
            continue;
          }
          const std::size_t w = graph_.tensor(operand.tensor).shape.cols;
          gather(part, operand.tensor, b, r, 1, 0, w, false, pruned_[node.id][o]);
          const std::size_t offset = operand.role == model::OperandRole::kResidual ? 0 : col;
          for (std::size_t c = 0; c < w; ++c) {
            x[offset + c] = numerics::saturating_add(x[offset + c], part[c], fmt_);
            effectual += part[c] != 0;
          }
          if (operand.role != model::OperandRole::kResidual) col += w;
        }
        const auto y = numerics::layer_norm(x, params->row(0, 0), params->row(0, 1),
                                            numerics::kLayerNormEps, fmt_);
        std::copy(y.begin(), y.end(), out.raw.begin() + static_cast<std::ptrdiff_t>(out.index(b, r, 0)));
      }
    const std::uint64_t elements = op.eb * op.er * cols;
    charge(id, EnergyComponent::kLayerNorm, static_cast<double>(effectual) * energy_.layernorm_elem_pj);
    charge(id, EnergyComponent::kSparsity, static_cast<double>(2 * elements) * energy_.sparsity_elem_pj);
    return arch::layernorm_cycles(op.eb * op.er, cols, hw_.multipliers_per_lane,
                                  hw_.layernorm_passes, hw_.nonlinear_fixed_cycles);
  }

  // ---- time --------------------------------------------------------------------

  void account(std::uint64_t t, std::uint64_t next) {
    const std::uint64_t dt = next - t;
    auto add = [&](StallReason r, std::uint64_t ops) {
      metrics_.stalls[static_cast<std::size_t>(r)] += ops * dt;
    };
    add(StallReason::kComputeOperandMissing, operand_missing_);
    add(StallReason::kMemStoreBeforeCompute, store_before_compute_);
    for (const auto& q : ready_) add(StallReason::kComputeNoModule, q.size());
    for (std::size_t pe : store_pes_) {
      add(port_free_[pe] > t ? StallReason::kMemBufferBusy : StallReason::kMemBufferFull,
          store_queues_[pe].size());
    }
    if (fifo_pos_ < g_.load_order.size()) {
      add(dma_free_ > t ? StallReason::kMemBufferBusy : StallReason::kMemBufferFull, 1);
    }
    const std::array<arch::LeakKind, sched::kModuleKinds> leak_kinds{
        arch::LeakKind::kMacLane, arch::LeakKind::kSoftmax, arch::LeakKind::kLayerNorm};
    for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
      const double leak = energy_.leakage_pj_per_cycle[static_cast<std::size_t>(leak_kinds[k])];
      const auto active = static_cast<double>(pools_[k].active());
      const auto idle = static_cast<double>(pools_[k].size() - pools_[k].active());
      const double pj = static_cast<double>(dt) * leak * (active + idle * energy_.power_gated_leak_fraction);
      charge(sched::kNoOp, EnergyComponent::kLeakage, pj);
      leak_fj_ += arch::to_fj(pj);
      busy_module_cycles_[k] += pools_[k].active() * dt;
    }
    if (opts_.trace) {
      UtilInterval u;
      u.start = t;
      u.end = next;
      for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
        u.active[k] = static_cast<std::uint32_t>(pools_[k].active());
      }
      u.act_used = act_.used();
      u.wt_used = wt_.used();
      u.mask_used = mask_.used();
      trace_.util.push_back(u);
    }
  }

  void finish(std::uint64_t t, SimResult& result) {
    // DynaTran units and buffers leak for the whole run; DynaTran is active one cycle per call
    const double total = static_cast<double>(t);
    const double dyn_leak = energy_.leakage_pj_per_cycle[static_cast<std::size_t>(arch::LeakKind::kDynaTran)];
    const double dyn_active = static_cast<double>(metrics_.dynatran_invocations);
    const double dyn_idle = static_cast<double>(hw_.pe_count) * total - dyn_active;
    const double extra = dyn_leak * (dyn_active + dyn_idle * energy_.power_gated_leak_fraction) +
                         total * (energy_.leakage_pj_per_cycle[static_cast<std::size_t>(arch::LeakKind::kActBuffer)] +
                                  energy_.leakage_pj_per_cycle[static_cast<std::size_t>(arch::LeakKind::kWtBuffer)] +
                                  energy_.leakage_pj_per_cycle[static_cast<std::size_t>(arch::LeakKind::kMaskBuffer)]);
    charge(sched::kNoOp, EnergyComponent::kLeakage, extra);
    leak_fj_ += arch::to_fj(extra);

    Metrics& m = metrics_;
    m.model = cfg_.name;
    m.hardware = hw_.name;
    m.total_cycles = t;
    m.op_count = g_.ops.size();
    m.dense = !settings_.tau.has_value();
    m.tau = settings_.tau.value_or(0.0);
    m.embedding_load_cycles = g_.embedding_load == sched::kNoOp ? 0 : records_[g_.embedding_load].end;
    const std::uint64_t steady = std::max<std::uint64_t>(1, t - std::min(t, m.embedding_load_cycles));
    const double clock = static_cast<double>(hw_.clock_hz);
    m.throughput_seq_per_s = static_cast<double>(cfg_.batch) / (static_cast<double>(steady) / clock);
    m.avg_power_w = t == 0 ? 0.0
                           : (static_cast<double>(m.total_energy_fj()) * 1e-15) / (total / clock);
    for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
      const double denom = total * static_cast<double>(pools_[k].size());
      m.avg_utilization[k] = denom > 0 ? static_cast<double>(busy_module_cycles_[k]) / denom : 0.0;
    }
    m.peak_act_buffer_frac = static_cast<double>(act_.peak()) / static_cast<double>(act_.capacity());
    m.peak_wt_buffer_frac = static_cast<double>(wt_.peak()) / static_cast<double>(wt_.capacity());
    m.peak_mask_buffer_frac = static_cast<double>(mask_.peak()) / static_cast<double>(mask_.capacity());
    m.achieved_activation_sparsity = achieved_sparsity();

    result.metrics = m;
    result.output = *acts_.at(graph_.final_output());
    result.ops = std::move(records_);
    result.leakage_fj = leak_fj_;
    result.util = std::move(trace_.util);
    result.dynatran = std::move(trace_.dynatran);
    result.schedule = std::move(trace_.schedule);
    for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
      result.module_counts[k] = pools_[k].size();
      result.module_ceilings[k] = pools_[k].ceiling();
    }
    result.act_capacity = act_.capacity();
    result.wt_capacity = wt_.capacity();
    result.mask_capacity = mask_.capacity();
    result.clock_hz = hw_.clock_hz;
    result.pe_count = hw_.pe_count;
  }

  // Zero fraction over every activation operand as the compute modules saw it.
  double achieved_sparsity() const {
    std::uint64_t elements = 0, zeros = 0;
    for (const auto& node : graph_.nodes()) {
      if (node.kind == model::OpKind::kMemLoad) continue;
      for (std::size_t o = 0; o < node.operands.size(); ++o) {
        const model::TensorId id = node.operands[o].tensor;
        if (graph_.tensor(id).role != model::TensorRole::kActivation) continue;
        const bool prune = pruned_[node.id][o];
        for (Raw v : acts_[id]->raw) {
          zeros += v == 0 || (prune && std::abs(static_cast<std::int64_t>(v)) < tau_raw_);
        }
        elements += acts_[id]->raw.size();
      }
    }
    return elements == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(elements);
  }

  std::string deadlock_report(std::uint64_t t) const {
    std::ostringstream os;
    os << "no operation can make progress at cycle " << t << "\n";
    std::map<std::string, std::size_t> waiting;
    for (const auto& op : g_.ops) {
      if (status_[op.id] == sched::OpStatus::kDone) continue;
      waiting[std::string(sched::to_string(op.kind)) + " " +
              std::string(sched::to_string(status_[op.id]))]++;
    }
    for (const auto& [k, v] : waiting) os << "  " << k << ": " << v << "\n";
    os << "  act buffer " << act_.used() << "/" << act_.capacity() << ", wt buffer " << wt_.used()
       << "/" << wt_.capacity() << ", mask buffer " << mask_.used() << "/" << mask_.capacity()
       << "\n";
    os << "  stalls so far:";
    for (std::size_t r = 0; r < sched::kStallReasons; ++r) {
      os << " " << sched::to_string(static_cast<StallReason>(r)) << "=" << metrics_.stalls[r];
    }
    return os.str();
  }

  using SchedOp = sched::SchedOp;
  using RankedSet = std::set<std::pair<std::uint32_t, OpId>>;

  model::ModelConfig cfg_;
  arch::HardwareConfig hw_;
  arch::EnergyModel energy_;
  SimOptions opts_;
  numerics::FixedFormat fmt_;
  model::OpGraph graph_;
  sched::SchedGraph g_;
  sparsity::PruneSettings settings_;
  Raw tau_raw_ = 0;
  numerics::ModelWeights weights_;
  std::vector<std::uint32_t> tokens_;
  std::vector<std::uint32_t> ranks_;
  std::vector<std::vector<bool>> pruned_;

  arch::Buffer act_, wt_, mask_;
  std::array<sched::ModulePool, sched::kModuleKinds> pools_;

  std::vector<sched::OpStatus> status_;
  std::vector<std::size_t> deps_issued_, deps_done_;
  std::vector<OpRecord> records_;
  std::vector<std::size_t> pending_;
  std::vector<bool> resident_;
  std::vector<std::uint64_t> value_bytes_, tile_mask_bytes_;
  std::vector<std::optional<FixedTensor>> acts_;
  std::unordered_map<std::uint64_t, std::vector<WideAcc>> partial_;
  std::vector<std::array<std::vector<TileId>, 2>> lane_last_;

  std::array<RankedSet, sched::kModuleKinds> ready_;
  std::vector<RankedSet> store_queues_;
  std::set<std::size_t> store_pes_;
  std::size_t operand_missing_ = 0;
  std::size_t store_before_compute_ = 0;
  std::size_t fifo_pos_ = 0;
  std::uint64_t dma_free_ = 0;
  std::vector<std::uint64_t> port_free_, dyn_free_;
  std::priority_queue<std::pair<std::uint64_t, OpId>, std::vector<std::pair<std::uint64_t, OpId>>,
                      std::greater<>>
      events_;

  Metrics metrics_;
  std::int64_t leak_fj_ = 0;
  std::array<std::uint64_t, sched::kModuleKinds> busy_module_cycles_{};
  struct {
    std::vector<UtilInterval> util;
    std::vector<DynaTranEvent> dynatran;
    std::vector<ScheduleEvent> schedule;
  } trace_;
  std::vector<OpId> newly_ready_;
  std::unordered_map<OpId, StallReason> last_reason_;
};

}  // namespace

SimResult run(const model::ModelConfig& cfg, const arch::HardwareConfig& hw,
              const arch::EnergyModel& energy, const SimOptions& opts) {
  return Engine(cfg, hw, energy, opts).run();
}

ScheduleComparison compare_schedules(const model::ModelConfig& cfg, const arch::HardwareConfig& hw,
                                     const arch::EnergyModel& energy, SimOptions opts) {
  if (cfg.heads < 2) throw ConfigError("schedule comparison needs at least two heads");
  ScheduleComparison out;
  opts.stagger = true;
  out.staggered = run(cfg, hw, energy, opts);
  opts.stagger = false;
  out.equal = run(cfg, hw, energy, opts);
  return out;
}

std::string utilization_csv(const SimResult& result, const arch::EnergyModel& energy) {
  if (result.util.empty() && result.metrics.total_cycles > 0) {
    throw ConfigError("utilization trace needs a traced run");
  }
  const std::uint64_t n = result.metrics.total_cycles;
  // dynamic energy spread evenly over each op's busy window; leakage from the interval state
  std::vector<double> delta(n + 1, 0.0);
  for (const auto& r : result.ops) {
    if (r.end <= r.issue || r.energy_fj == 0) continue;
    const double rate = static_cast<double>(r.energy_fj) / static_cast<double>(r.end - r.issue);
    delta[r.issue] += rate;
    delta[std::min(r.end, n)] -= rate;
  }
  const auto leak = [&](arch::LeakKind k) {
    return energy.leakage_pj_per_cycle[static_cast<std::size_t>(k)] * 1000.0;
  };
  const double fixed_fj = leak(arch::LeakKind::kActBuffer) + leak(arch::LeakKind::kWtBuffer) +
                          leak(arch::LeakKind::kMaskBuffer) +
                          leak(arch::LeakKind::kDynaTran) * static_cast<double>(result.pe_count) *
                              energy.power_gated_leak_fraction;
  const std::array<arch::LeakKind, sched::kModuleKinds> kinds{
      arch::LeakKind::kMacLane, arch::LeakKind::kSoftmax, arch::LeakKind::kLayerNorm};
  std::ostringstream os;
  os << "cycle,mac_util,softmax_util,layernorm_util,act_buf_frac,wt_buf_frac,mask_buf_frac,power_w\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  double running = 0;
  std::uint64_t cycle = 0;
  const double clock = static_cast<double>(result.clock_hz);
  for (const auto& u : result.util) {
    double leak_fj = fixed_fj;
    std::array<double, sched::kModuleKinds> util{};
    for (std::size_t k = 0; k < sched::kModuleKinds; ++k) {
      const double total = static_cast<double>(result.module_counts[k]);
      util[k] = total > 0 ? u.active[k] / total : 0.0;
      leak_fj += leak(kinds[k]) * (u.active[k] + (total - u.active[k]) * energy.power_gated_leak_fraction);
    }
    for (; cycle < u.end; ++cycle) {
      running += delta[cycle];
      const double power = (std::max(running, 0.0) + leak_fj) * 1e-15 * clock;
      os << cycle << ',' << util[0] << ',' << util[1] << ',' << util[2] << ','
         << static_cast<double>(u.act_used) / static_cast<double>(result.act_capacity) << ','
         << static_cast<double>(u.wt_used) / static_cast<double>(result.wt_capacity) << ','
         << static_cast<double>(u.mask_used) / static_cast<double>(result.mask_capacity) << ','
         << power << '\n';
    }
  }
  return os.str();
}

std::string schedule_csv(const SimResult& result) {
  std::ostringstream os;
  os << "cycle,op,event,detail\n";
  for (const auto& e : result.schedule) {
    os << e.cycle << ',' << e.op << ',';
    switch (e.kind) {
      case EventKind::kIssue: os << "issue,"; break;
      case EventKind::kComplete: os << "complete,"; break;
      case EventKind::kStall: os << "stall," << sched::to_string(e.reason); break;
      case EventKind::kEvict: os << "evict,tile"; break;
    }
    os << '\n';
  }
  return os.str();
}

arch::HardwareConfig with_buffer_total(arch::HardwareConfig hw, std::uint64_t total_bytes) {
  const std::uint64_t unit = total_bytes / 13;
  if (unit == 0) throw ConfigError("buffer total too small to split 4:8:1");
  hw.act_buffer_bytes = 4 * unit;
  hw.wt_buffer_bytes = 8 * unit;
  hw.mask_buffer_bytes = unit;
  return hw;
}

std::vector<SweepRow> design_sweep(const model::ModelConfig& cfg, const arch::HardwareConfig& base,
                                   const arch::EnergyModel& energy, const SimOptions& opts,
                                   const std::vector<std::size_t>& pe_list,
                                   const std::vector<std::uint64_t>& buffer_totals) {
  if (pe_list.empty() || buffer_totals.empty()) throw ConfigError("design sweep grid is empty");
  std::vector<std::future<SweepRow>> jobs;
  for (std::size_t pes : pe_list) {
    for (std::uint64_t total : buffer_totals) {
      arch::HardwareConfig hw = with_buffer_total(base, total);
      hw.pe_count = pes;
      jobs.push_back(std::async(std::launch::async, [cfg, hw, energy, opts, total] {
        SimOptions o = opts;
        o.trace = false;
        const SimResult r = run(cfg, hw, energy, o);
        return SweepRow{hw.pe_count, total, r.metrics.compute_stalls(), r.metrics.memory_stalls(),
                        r.metrics.total_cycles};
      }));
    }
  }
  std::vector<SweepRow> rows;
  for (auto& j : jobs) rows.push_back(j.get());
  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.pe_count, a.buffer_bytes) < std::tie(b.pe_count, b.buffer_bytes);
  });
  return rows;
}

std::vector<std::size_t> default_sweep_pes() { return {32, 64, 128, 256}; }

std::vector<std::uint64_t> default_sweep_buffers() {
  std::vector<std::uint64_t> out;
  for (std::uint64_t mb = 10; mb <= 16; ++mb) out.push_back(mb << 20);
  return out;
}

std::string design_sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "pe_count,buffer_bytes,compute_stalls,memory_stalls,total_stalls,total_cycles\n";
  for (const auto& r : rows) {
    os << r.pe_count << ',' << r.buffer_bytes << ',' << r.compute_stalls << ',' << r.memory_stalls
       << ',' << (r.compute_stalls + r.memory_stalls) << ',' << r.total_cycles << '\n';
  }
  return os.str();
}

}  // namespace acceltran::sim
