#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acceltran/model.hpp"
#include "acceltran/numerics.hpp"

namespace acceltran::sparsity {

using numerics::FixedFormat;
using numerics::FixedTensor;
using numerics::Raw;

/// One bit per logical element, row-major; 1 marks an effectual (nonzero) element.
class Mask {
 public:
  Mask() = default;
  explicit Mask(model::Shape shape);

  const model::Shape& shape() const { return shape_; }
  std::size_t size() const { return size_; }
  bool test(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1U; }
  void set(std::size_t i, bool on = true);
  std::size_t popcount() const;
  const std::vector<std::uint64_t>& words() const { return words_; }

  Mask operator&(const Mask& other) const;
  Mask operator^(const Mask& other) const;
  bool operator==(const Mask& other) const = default;
  std::string to_string() const;

 private:
  void check_compatible(const Mask& other) const;

  model::Shape shape_{0, 0, 0};
  std::size_t size_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Mask of the nonzero elements of a tensor.
Mask nonzero_mask(const FixedTensor& t);

struct CompressedTile {
  std::vector<Raw> values;
  Mask mask;
  FixedFormat fmt;

  std::size_t nnz() const { return values.size(); }
  bool operator==(const CompressedTile&) const = default;
};

struct Pruned {
  FixedTensor tensor;
  Mask mask;
};

/// Threshold in raw units; comparisons inside the module are integer compares.
Raw threshold_raw(double tau, FixedFormat fmt);

/// Keeps elements with |x| >= tau; the input is left untouched.
Pruned dynatran_prune(const FixedTensor& tile, double tau);
/// In-place variant; returns the number of elements zeroed by this call.
std::size_t dynatran_prune_inplace(FixedTensor& tile, Raw tau_raw);

double pruning_ratio(const FixedTensor& tile);

/// Keeps the k largest values of every row (ties keep the lower column index).
Pruned topk_prune(const FixedTensor& scores, std::size_t k);

CompressedTile compress(const FixedTensor& tile, const Mask& mask);
CompressedTile compress(const FixedTensor& tile);
FixedTensor decompress(const CompressedTile& ct);

struct PairFiltered {
  std::vector<Raw> act;
  std::vector<Raw> wt;
  Mask common;
  Mask act_filter;  // effectual activations with no weight partner
  Mask wt_filter;
};

/// Pre-compute sparsity module: AND the masks and collapse both streams onto the
/// common positions. Masks are paired element by element (same element count).
PairFiltered pair_filter(const CompressedTile& act, const CompressedTile& wt);

/// Post-compute sparsity module: drops zero results and clears their mask bits.
/// `results` holds one value per set bit of `out_mask`.
CompressedTile post_expand(std::span<const Raw> results, const Mask& out_mask, FixedFormat fmt);

/// Sum of products over the common positions of two paired compressed vectors.
numerics::WideAcc compressed_dot(const CompressedTile& act, const CompressedTile& wt);

struct TileMacResult {
  std::vector<numerics::WideAcc> partial;  // x*z accumulators, row-major
  std::size_t effectual_macs = 0;
};

/// (x,y) x (y,z) tile product through the pair-filter path. `w` and `a` are batch-1
/// compressed tiles; partial sums stay unrounded so k-tiles can be chained.
TileMacResult sparse_tile_mac(const CompressedTile& w, const CompressedTile& a);

/// Effectual MAC count of a tile product straight from the masks.
std::size_t effectual_macs(const Mask& w, const Mask& a);

struct ProfilePoint {
  double tau = 0;
  double rho = 0;
  bool operator==(const ProfilePoint&) const = default;
};

struct SparsityProfile {
  std::string model_name;
  std::vector<ProfilePoint> points;
  bool operator==(const SparsityProfile&) const = default;
};

/// Throws ConfigError unless tau is strictly increasing and rho nondecreasing in [0,1].
void validate_profile(const SparsityProfile& profile);

/// Smallest tau on the piecewise-linear curve reaching rho_target; clamps to the last tau.
double threshold_lookup(const SparsityProfile& profile, double rho_target);

/// What DynaTran is allowed to touch. Layer-norm parameters are never pruned.
struct PruneSettings {
  std::optional<double> tau;  // unset means dense mode
  bool prune_weights = false;
  bool prune_matmul_activations = true;
  bool prune_softmax_input = true;
  bool prune_layernorm_input = true;
};

/// True when the given operand of `node` passes through DynaTran under `settings`.
bool operand_pruned(const model::OpGraph& graph, const model::OpNode& node,
                    const model::Operand& operand, const PruneSettings& settings);

struct SparsityStats {
  std::uint64_t activation_elements = 0;
  std::uint64_t activation_zeros = 0;
  std::uint64_t weight_elements = 0;
  std::uint64_t weight_zeros = 0;

  double activation_sparsity() const;
  double weight_sparsity() const;
};

struct PrunedForward {
  numerics::ForwardResult result;
  SparsityStats stats;
};

/// Functional forward pass with DynaTran applied to compute operands.
PrunedForward pruned_forward(const model::OpGraph& graph, const numerics::ModelWeights& weights,
                             std::span<const std::uint32_t> tokens, FixedFormat fmt,
                             const PruneSettings& settings);

/// Default grid: 16 evenly spaced thresholds over [0, 0.1].
std::vector<double> default_tau_grid();

/// Runs the pruned forward pass at each tau and records activation-operand sparsity.
SparsityProfile profile_thresholds(const model::ModelConfig& cfg,
                                   const numerics::ModelWeights& weights,
                                   std::span<const std::uint32_t> tokens, FixedFormat fmt,
                                   std::span<const double> tau_grid,
                                   PruneSettings settings = {});

}  // namespace acceltran::sparsity
