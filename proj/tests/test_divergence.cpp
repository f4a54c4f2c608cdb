#include "doctest.h"

#include "devolve/divergence.hpp"
#include "devolve/random.hpp"

using namespace devolve;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("single head mse") {
  const Tensor teacher({1, 2}, std::vector<double>{1, 0});
  const Tensor student({1, 2}, std::vector<double>{0, 1});
  CHECK(divergence(student, teacher, {}) == 1.0);
  CHECK(divergence(teacher, teacher, {}) == 0.0);
}

TEST_CASE("zero-weight heads do not count") {
  const Tensor t = random_tensor({4, 6}, 1), s = random_tensor({4, 6}, 2);
  const DivergenceSpec head1{{{0, 2, 1.0, 1.0}}};
  const DivergenceSpec both{{{0, 2, 1.0, 1.0}, {2, 6, 1.0, 0.0}}};
  CHECK(divergence(s, t, both) == doctest::Approx(divergence(s, t, head1)).epsilon(1e-15));
}

TEST_CASE("heads are normalized then weight-averaged") {
  const Tensor t({2, 3}, std::vector<double>{0, 0, 0, 0, 0, 0});
  const Tensor s({2, 3}, std::vector<double>{1, 4, 4, 1, 4, 4});
  // head A: values 1 over width 1 -> mse 1; head B: values 4/4 -> mse 1 after dividing by 4.
  const DivergenceSpec spec{{{0, 1, 1.0, 3.0}, {1, 3, 4.0, 1.0}}};
  CHECK(divergence(s, t, spec) == doctest::Approx(1.0));
  const DivergenceSpec raw{{{0, 1, 1.0, 1.0}, {1, 3, 1.0, 1.0}}};
  CHECK(divergence(s, t, raw) == doctest::Approx((1.0 + 16.0) / 2));
}

TEST_CASE("gradient matches central differences") {
  const Tensor t = random_tensor({3, 5}, 3);
  Tensor s = random_tensor({3, 5}, 4);
  const DivergenceSpec spec{{{0, 2, 0.5, 2.0}, {1, 5, 3.0, 1.0}}};
  const Tensor g = divergence_gradient(s, t, spec);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double w = s[i];
    s[i] = w + 1e-6;
    const double up = divergence(s, t, spec);
    s[i] = w - 1e-6;
    const double down = divergence(s, t, spec);
    s[i] = w;
    CHECK(g[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("invalid specs and shapes are rejected") {
  const Tensor t({1, 3}), s({1, 3});
  CHECK_THROWS_AS(divergence(s, t, DivergenceSpec{{{0, 4, 1.0, 1.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(divergence(s, t, DivergenceSpec{{{2, 2, 1.0, 1.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(divergence(s, t, DivergenceSpec{{{0, 3, 0.0, 1.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(divergence(s, t, DivergenceSpec{{{0, 3, 1.0, 0.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(divergence(s, t, DivergenceSpec{{{0, 3, 1.0, -1.0}, {0, 1, 1.0, 2.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(divergence(Tensor({1, 2}), t, {}), std::invalid_argument);
}
