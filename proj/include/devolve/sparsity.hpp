#pragma once

#include <cstddef>
#include <vector>

#include "devolve/network.hpp"

namespace devolve {

/// Indices proposed for zeroing in one layer. Indices address the layer's
/// parameters concatenated in order (weights first, then bias), row-major.
struct CandidateSet {
  std::size_t layer = 0;
  std::vector<std::size_t> indices;  // sorted, unique

  bool empty() const { return indices.empty(); }
  std::size_t size() const { return indices.size(); }
  friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

enum class SparsityScope { Layer, Network };

/// Per-tensor bitsets of irrevocably zeroed positions (true = pruned).
///
/// Bits only ever go from false to true; there is no way to clear one.
class SparsityMask {
 public:
  SparsityMask() = default;
  explicit SparsityMask(const Network& net);
  static SparsityMask full(const Network& net);

  std::size_t layer_count() const { return bits_.size(); }
  std::size_t tensor_count(std::size_t layer) const { return bits_.at(layer).size(); }
  const std::vector<bool>& bits(std::size_t layer, std::size_t tensor) const { return bits_.at(layer).at(tensor); }

  std::size_t layer_size(std::size_t layer) const;
  std::size_t total_size() const;
  std::size_t zeroed(std::size_t layer) const;
  std::size_t zeroed_total() const;

  /// Bit at a layer-flat index (see CandidateSet).
  bool is_zeroed(std::size_t layer, std::size_t flat_index) const;

  /// Marks one layer-flat index as pruned. Returns true when the bit was newly set.
  bool zero(std::size_t layer, std::size_t flat_index);

  void check_matches(const Network& net) const;

  friend bool operator==(const SparsityMask&, const SparsityMask&) = default;

 private:
  std::vector<std::vector<std::vector<bool>>> bits_;  // [layer][tensor][index]
};

/// Copy of `net` with every masked position set to exactly 0.0.
Network apply_mask(const Network& net, const SparsityMask& mask);
void apply_mask_in_place(Network& net, const SparsityMask& mask);

/// Union of the mask and the candidate's indices.
SparsityMask merge(const SparsityMask& mask, const CandidateSet& cand);

/// Number of candidate indices not already zeroed in `mask`.
std::size_t new_zero_count(const SparsityMask& mask, const CandidateSet& cand);

/// zeroed / total over one layer or the whole network.
double sparsity(const SparsityMask& mask, SparsityScope scope, std::size_t layer = 0);

/// Flat indices of a layer that candidate sampling may draw from.
std::size_t prunable_count(const Network& net, std::size_t layer, bool include_bias);

/// Sparsity over a layer's prunable positions only.
double prunable_sparsity(const SparsityMask& mask, const Network& net, std::size_t layer, bool include_bias);

/// Reference to a single parameter: tensor index and offset inside it.
struct ParamLocation {
  std::size_t tensor;
  std::size_t offset;
};
ParamLocation locate(const Layer& layer, std::size_t flat_index);

}  // namespace devolve
