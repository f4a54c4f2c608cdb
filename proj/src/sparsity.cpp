#include "devolve/sparsity.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace devolve {

SparsityMask::SparsityMask(const Network& net) {
  bits_.resize(net.layer_count());
  for (std::size_t i = 0; i < net.layer_count(); ++i)
    for (const auto& p : net.layers()[i].params) bits_[i].emplace_back(p.size(), false);
}

SparsityMask SparsityMask::full(const Network& net) {
  SparsityMask m(net);
  for (auto& layer : m.bits_)
    for (auto& t : layer) t.assign(t.size(), true);
  return m;
}

std::size_t SparsityMask::layer_size(std::size_t layer) const {
  std::size_t n = 0;
  for (const auto& t : bits_.at(layer)) n += t.size();
  return n;
}

std::size_t SparsityMask::total_size() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < bits_.size(); ++i) n += layer_size(i);
  return n;
}

std::size_t SparsityMask::zeroed(std::size_t layer) const {
  std::size_t n = 0;
  for (const auto& t : bits_.at(layer)) n += static_cast<std::size_t>(std::count(t.begin(), t.end(), true));
  return n;
}

std::size_t SparsityMask::zeroed_total() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < bits_.size(); ++i) n += zeroed(i);
  return n;
}

bool SparsityMask::is_zeroed(std::size_t layer, std::size_t flat_index) const {
  for (const auto& t : bits_.at(layer)) {
    if (flat_index < t.size()) return t[flat_index];
    flat_index -= t.size();
  }
  throw std::out_of_range("mask index out of range in layer " + std::to_string(layer));
}

bool SparsityMask::zero(std::size_t layer, std::size_t flat_index) {
  for (auto& t : bits_.at(layer)) {
    if (flat_index < t.size()) {
      const bool was = t[flat_index];
      t[flat_index] = true;
      return !was;
    }
    flat_index -= t.size();
  }
  throw std::out_of_range("mask index out of range in layer " + std::to_string(layer));
}

void SparsityMask::check_matches(const Network& net) const {
  if (bits_.size() != net.layer_count()) {
    throw std::invalid_argument("mask covers " + std::to_string(bits_.size()) + " layers, network has " +
                                std::to_string(net.layer_count()));
  }
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    const auto& params = net.layers()[i].params;
    if (bits_[i].size() != params.size()) throw std::invalid_argument("mask tensor count mismatch at layer " + std::to_string(i));
    for (std::size_t t = 0; t < params.size(); ++t) {
      if (bits_[i][t].size() != params[t].size()) {
        throw std::invalid_argument("mask size mismatch at layer " + std::to_string(i) + " tensor " + std::to_string(t));
      }
    }
  }
}

void apply_mask_in_place(Network& net, const SparsityMask& mask) {
  mask.check_matches(net);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    auto& params = net.layers()[i].params;
    for (std::size_t t = 0; t < params.size(); ++t) {
      const auto& b = mask.bits(i, t);
      auto& w = params[t].data();
      for (std::size_t k = 0; k < w.size(); ++k)
        if (b[k]) w[k] = 0.0;
    }
  }
}

Network apply_mask(const Network& net, const SparsityMask& mask) {
  Network out = net;
  apply_mask_in_place(out, mask);
  return out;
}

SparsityMask merge(const SparsityMask& mask, const CandidateSet& cand) {
  SparsityMask out = mask;
  for (std::size_t idx : cand.indices) out.zero(cand.layer, idx);
  return out;
}

std::size_t new_zero_count(const SparsityMask& mask, const CandidateSet& cand) {
  std::size_t n = 0;
  for (std::size_t idx : cand.indices)
    if (!mask.is_zeroed(cand.layer, idx)) ++n;
  return n;
}

double sparsity(const SparsityMask& mask, SparsityScope scope, std::size_t layer) {
  if (scope == SparsityScope::Layer) {
    const std::size_t total = mask.layer_size(layer);
    return total ? static_cast<double>(mask.zeroed(layer)) / static_cast<double>(total) : 0.0;
  }
  const std::size_t total = mask.total_size();
  return total ? static_cast<double>(mask.zeroed_total()) / static_cast<double>(total) : 0.0;
}

std::size_t prunable_count(const Network& net, std::size_t layer, bool include_bias) {
  const auto& params = net.layers().at(layer).params;
  if (params.empty()) return 0;
  return include_bias ? net.layers()[layer].parameter_count() : params[0].size();
}

double prunable_sparsity(const SparsityMask& mask, const Network& net, std::size_t layer, bool include_bias) {
  const std::size_t total = prunable_count(net, layer, include_bias);
  if (total == 0) return 0.0;
  const auto& w = mask.bits(layer, 0);
  std::size_t z = static_cast<std::size_t>(std::count(w.begin(), w.end(), true));
  if (include_bias)
    for (std::size_t t = 1; t < mask.tensor_count(layer); ++t) {
      const auto& b = mask.bits(layer, t);
      z += static_cast<std::size_t>(std::count(b.begin(), b.end(), true));
    }
  return static_cast<double>(z) / static_cast<double>(total);
}

ParamLocation locate(const Layer& layer, std::size_t flat_index) {
  for (std::size_t t = 0; t < layer.params.size(); ++t) {
    if (flat_index < layer.params[t].size()) return {t, flat_index};
    flat_index -= layer.params[t].size();
  }
  throw std::out_of_range("parameter index out of range");
}

}  // namespace devolve
