#pragma once

#include <cstddef>
#include <vector>

#include "devolve/tensor.hpp"

namespace devolve {

/// One slice [begin, end) of the flattened per-sample output, compared
/// after dividing both sides by `divisor`.
struct DivergenceHead {
  std::size_t begin = 0;
  std::size_t end = 0;
  double divisor = 1.0;
  double weight = 1.0;

  friend bool operator==(const DivergenceHead&, const DivergenceHead&) = default;
};

/// Multi-head normalized MSE. The divergence is the weight-averaged mean
/// squared error of the heads; an empty head list means one head covering
/// the whole output.
struct DivergenceSpec {
  std::vector<DivergenceHead> heads;

  void validate(std::size_t out_dim) const;
  friend bool operator==(const DivergenceSpec&, const DivergenceSpec&) = default;
};

/// Divergence between student and teacher outputs, both [n, out_dim].
double divergence(const Tensor& student, const Tensor& teacher, const DivergenceSpec& spec);

/// d divergence / d student, shaped like `student`.
Tensor divergence_gradient(const Tensor& student, const Tensor& teacher, const DivergenceSpec& spec);

}  // namespace devolve
