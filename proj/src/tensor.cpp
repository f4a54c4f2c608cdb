#include "devolve/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace devolve {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor shape " + shape_to_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / shape_[0];
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) throw std::out_of_range("slice_rows out of range");
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t rs = row_size();
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * rs),
                        data_.begin() + static_cast<std::ptrdiff_t>(end * rs));
  return Tensor(std::move(s), std::move(d));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape s = t.shape();
  s.at(0) = rows.size();
  const std::size_t rs = t.row_size();
  std::vector<double> d;
  d.reserve(rows.size() * rs);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw std::out_of_range("gather_rows index out of range");
    auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * rs);
    d.insert(d.end(), first, first + static_cast<std::ptrdiff_t>(rs));
  }
  return Tensor(std::move(s), std::move(d));
}

}  // namespace devolve
