#include "devolve/divergence.hpp"

#include <stdexcept>
#include <string>

namespace devolve {

void DivergenceSpec::validate(std::size_t out_dim) const {
  double total = 0.0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto& hd = heads[h];
    const std::string where = "divergence head " + std::to_string(h);
    if (hd.begin >= hd.end || hd.end > out_dim) {
      throw std::invalid_argument(where + ": slice [" + std::to_string(hd.begin) + "," + std::to_string(hd.end) +
                                  ") invalid for output width " + std::to_string(out_dim));
    }
    if (!(hd.divisor > 0.0)) throw std::invalid_argument(where + ": divisor must be positive");
    if (!(hd.weight >= 0.0)) throw std::invalid_argument(where + ": weight must be nonnegative");
    total += hd.weight;
  }
  if (!heads.empty() && !(total > 0.0)) throw std::invalid_argument("divergence heads need a positive weight");
}

namespace {

struct Dims {
  std::size_t n, m;
};

Dims check(const Tensor& s, const Tensor& t, const DivergenceSpec& spec) {
  if (s.shape() != t.shape() || s.rank() != 2 || s.dim(0) == 0) {
    throw std::invalid_argument("divergence: student " + shape_to_string(s.shape()) + " vs teacher " +
                                shape_to_string(t.shape()));
  }
  spec.validate(s.dim(1));
  return {s.dim(0), s.dim(1)};
}

template <class Fn>
void for_each_head(const DivergenceSpec& spec, std::size_t m, Fn&& fn) {
  if (spec.heads.empty()) {
    fn(DivergenceHead{0, m, 1.0, 1.0}, 1.0);
    return;
  }
  double total = 0.0;
  for (const auto& h : spec.heads) total += h.weight;
  for (const auto& h : spec.heads)
    if (h.weight > 0.0) fn(h, h.weight / total);
}

}  // namespace

double divergence(const Tensor& student, const Tensor& teacher, const DivergenceSpec& spec) {
  const auto [n, m] = check(student, teacher, spec);
  const double* s = student.data().data();
  const double* t = teacher.data().data();
  double total = 0.0;
  for_each_head(spec, m, [&](const DivergenceHead& h, double w) {
    const double inv = 1.0 / h.divisor;
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = h.begin; j < h.end; ++j) {
        const double d = (s[r * m + j] - t[r * m + j]) * inv;
        acc += d * d;
      }
    total += w * acc / static_cast<double>(n * (h.end - h.begin));
  });
  return total;
}

Tensor divergence_gradient(const Tensor& student, const Tensor& teacher, const DivergenceSpec& spec) {
  const auto [n, m] = check(student, teacher, spec);
  Tensor g(student.shape());
  for_each_head(spec, m, [&](const DivergenceHead& h, double w) {
    const double scale = 2.0 * w / (static_cast<double>(n * (h.end - h.begin)) * h.divisor * h.divisor);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = h.begin; j < h.end; ++j) g[r * m + j] += scale * (student[r * m + j] - teacher[r * m + j]);
  });
  return g;
}

}  // namespace devolve
