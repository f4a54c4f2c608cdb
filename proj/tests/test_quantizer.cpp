#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "devolve/quantizer.hpp"
#include "devolve/random.hpp"
#include "quantizer_oracle.hpp"

using namespace devolve;

namespace {

double tent(double w) { return w < 0.5 ? w : 1.0 - w; }

double roof(double w) { return 1.0 - std::abs(w); }

double bimodal(double w) {
  auto g = [](double x, double mu, double s) { return std::exp(-0.5 * (x - mu) * (x - mu) / (s * s)); };
  return g(w, -0.5, 0.2) + 0.6 * g(w, 0.4, 0.15);
}

std::vector<double> gaussian_values(std::size_t n, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("scheme and rounding names") {
  for (auto s : {QuantScheme::UniformScale, QuantScheme::UniformAffine, QuantScheme::OptimalDensity, QuantScheme::Identity})
    CHECK(parse_scheme(to_string(s)) == s);
  CHECK(parse_rounding("stochastic") == Rounding::Stochastic);
  CHECK(parse_rounding("nearest") == Rounding::Nearest);
  CHECK_THROWS_AS(parse_scheme("lloyd"), std::invalid_argument);
}

TEST_CASE("affine levels") {
  const auto l = uniform_levels(-1, 1, 2, QuantScheme::UniformAffine);
  REQUIRE(l.size() == 4);
  CHECK(l[0] == -1.0);
  CHECK(l[1] == doctest::Approx(-1.0 / 3));
  CHECK(l[2] == doctest::Approx(1.0 / 3));
  CHECK(l[3] == 1.0);
  CHECK(uniform_levels(-0.3, 0.7, 1, QuantScheme::UniformAffine) == std::vector<double>{-0.3, 0.7});
  const auto e = uniform_levels(-0.123, 0.456, 8, QuantScheme::UniformAffine);
  CHECK(e.front() == -0.123);
  CHECK(e.back() == 0.456);
}

TEST_CASE("scale-only levels") {
  const auto l = uniform_levels(-1, 1, 2, QuantScheme::UniformScale);
  CHECK(l == std::vector<double>{-2, -1, 0, 1});
  CHECK(l[nearest_code(l, 1.0)] == 1.0);
  const auto e = uniform_levels(-0.2, 0.5, 4, QuantScheme::UniformScale);
  CHECK(e.size() == 16);
  CHECK(std::find(e.begin(), e.end(), 0.0) != e.end());
  CHECK(e.back() == doctest::Approx(0.5));
  // values beyond the code range clip
  CHECK(e[nearest_code(e, 9.0)] == e.back());
}

TEST_CASE("degenerate ranges collapse to one level") {
  CHECK(uniform_levels(0.25, 0.25, 4, QuantScheme::UniformAffine) == std::vector<double>{0.25});
  const std::vector<double> v(5, 0.25);
  const QuantizationSpec s = make_spec(v, QuantScheme::UniformAffine, 4, Rounding::Nearest);
  CHECK(s.degenerate());
  CHECK(s.bits == 0);
  CHECK(quantize(v, s) == std::vector<std::uint32_t>(5, 0));
  CHECK_THROWS(uniform_levels(1, 0, 2, QuantScheme::UniformAffine));
  CHECK_THROWS(uniform_levels(0, 1, 0, QuantScheme::UniformAffine));
}

TEST_CASE("density normalization and floor") {
  const Density d = Density::from_values(gaussian_values(5000, 1), 256);
  const double total = std::accumulate(d.masses().begin(), d.masses().end(), 0.0);
  CHECK(std::abs(total - 1.0) <= 1e-12);
  CHECK(d.floor() > 0.0);
  for (int i = 0; i <= 1000; ++i) CHECK(d(d.lo() + (d.hi() - d.lo()) * i / 1000.0) >= d.floor());
  const Density u = Density::uniform(0, 2, 16);
  CHECK(u(0.3) == doctest::Approx(0.5));
  CHECK_THROWS(Density::from_values(std::vector<double>{}, 8));
  CHECK_THROWS(Density::from_values(std::vector<double>{1, 1}, 8));
}

TEST_CASE("optimal levels on a uniform density are evenly spaced") {
  for (int bits : {1, 2, 3, 4, 6, 8}) {
    CAPTURE(bits);
    const Density d = Density::uniform(-0.7, 1.3);
    const auto lv = optimal_levels(d, bits);
    const auto even = uniform_levels(-0.7, 1.3, bits, QuantScheme::UniformAffine);
    REQUIRE(lv.size() == even.size());
    for (std::size_t i = 0; i < lv.size(); ++i) CHECK(std::abs(lv[i] - even[i]) <= 1e-9);
  }
}

TEST_CASE("one-bit optimal levels are the endpoints") {
  const Density d = Density::from_function(0, 1, 64, bimodal);
  CHECK(optimal_levels(d, 1) == std::vector<double>{0.0, 1.0});
}

TEST_CASE("optimal levels satisfy the spacing condition") {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (int bits : {2, 3, 4, 8}) {
      CAPTURE(seed);
      CAPTURE(bits);
      const Density d = Density::from_values(gaussian_values(20000, seed, 0.05 + 0.02 * seed), 256);
      const OptimalLevels o = optimal_levels_solve(d, bits);
      REQUIRE(o.levels.size() == (std::size_t{1} << bits));
      CHECK(o.levels.front() == d.lo());
      CHECK(o.levels.back() == d.hi());
      CHECK(std::adjacent_find(o.levels.begin(), o.levels.end(), std::greater_equal<>()) == o.levels.end());
      CHECK(max_interior_residual(o.levels, d) <= 1e-6 * o.constant);
    }
}

TEST_CASE("tent density: spacing condition and exact L1 minimizer in closed form") {
  // Levels {0, a, 1-a, 1} on p(w) = min(w, 1-w). The spacing condition gives
  // a^2 = 1 - 2a, so a = sqrt(2) - 1. Zero derivative of the L1 error instead
  // needs equal mass on both sides of a within its cell, 3a^2/8 = (1/4 - a^2)/2,
  // so a = 1/sqrt(7). The two differ by about 0.036.
  const Density d = Density::from_function(0, 1, 256, tent);
  const auto lv = optimal_levels(d, 2);
  CHECK(std::abs(lv[1] - (std::sqrt(2.0) - 1)) <= 2e-3);
  CHECK(std::abs(lv[2] - (2 - std::sqrt(2.0))) <= 2e-3);

  const GridOracle oracle(0, 1, 1e-3, [&](double w) { return d(w); });
  const auto brute = oracle.best_two();
  CHECK(std::abs(brute[1] - 1 / std::sqrt(7.0)) <= 2e-3);
  CHECK(std::abs(brute[2] - (1 - 1 / std::sqrt(7.0))) <= 2e-3);

  const auto affine = uniform_levels(0, 1, 2, QuantScheme::UniformAffine);
  CHECK(quantization_error(lv, d) < quantization_error(affine, d));
  CHECK(oracle.error(brute) <= oracle.error(lv));
}

TEST_CASE("the grid oracle agrees with the integrated error") {
  for (auto f : {roof, bimodal}) {
    const Density d = Density::from_function(-1, 1, 64, f);
    const GridOracle oracle(-1, 1, 1e-3, [&](double w) { return d(w); });
    const std::vector<double> lv{-1, -0.3, 0.2, 1};
    CHECK(oracle.error(lv) == doctest::Approx(quantization_error(lv, d)).epsilon(1e-4));
    const auto brute = oracle.best_two();
    CHECK(oracle.error(brute) <= oracle.error(optimal_levels(d, 2)));
    CHECK(oracle.error(brute) <= oracle.error(uniform_levels(-1, 1, 2, QuantScheme::UniformAffine)));
  }
}

TEST_CASE("three-level L1 optimum puts the level at its cell median") {
  const Density d = Density::from_function(0, 1, 8, [](double w) { return 1.0 + 3.0 * w * w; });
  const GridOracle oracle(0, 1, 1e-3, [&](double w) { return d(w); });
  const auto brute = oracle.best_one();
  // mass[l/2, l] == mass[l, (1+l)/2], solved by bisection on fine quadrature.
  auto mass = [&](double a, double b) {
    double m = 0.0;
    const int steps = 4000;
    const double h = (b - a) / steps;
    for (int i = 0; i < steps; ++i) m += d(a + (i + 0.5) * h) * h;
    return m;
  };
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 60; ++it) {
    const double l = 0.5 * (lo + hi);
    (mass(0.5 * l, l) < mass(l, 0.5 * (1 + l)) ? lo : hi) = l;
  }
  CHECK(std::abs(0.5 * (lo + hi) - brute[1]) <= 2e-3);
}

TEST_CASE("quantization error closed forms") {
  const Density u = Density::uniform(0, 1);
  CHECK(quantization_error(std::vector<double>{0, 1}, u) == doctest::Approx(0.25).epsilon(1e-9));
  // L1 error of evenly spaced levels on a uniform density is 1 / (4 * gaps).
  double prev = quantization_error(std::vector<double>{0, 1}, u);
  for (int gaps : {2, 4, 8, 16}) {
    std::vector<double> lv(gaps + 1);
    for (int i = 0; i <= gaps; ++i) lv[i] = static_cast<double>(i) / gaps;
    const double e = quantization_error(lv, u);
    CHECK(e == doctest::Approx(prev / 2).epsilon(1e-9));
    prev = e;
  }
  // a level at every bin midpoint leaves almost nothing
  const Density d = Density::from_function(0, 1, 32, bimodal);
  std::vector<double> mids;
  for (std::size_t b = 0; b < 32; ++b) mids.push_back((b + 0.5) / 32);
  CHECK(quantization_error(mids, d) < 0.01);
}

TEST_CASE("optimal levels use the codes more evenly than affine") {
  const auto v = gaussian_values(20000, 4);
  const Density d = Density::from_values(v, 256);
  auto code_entropy = [&](const std::vector<double>& levels) {
    const int b = static_cast<int>(std::log2(static_cast<double>(levels.size())));
    const QuantizationSpec s{QuantScheme::OptimalDensity, b, Rounding::Nearest, levels, 0};
    std::vector<double> counts(levels.size(), 0.0);
    for (auto c : quantize(v, s)) counts[c] += 1.0;
    double h = 0.0;
    for (double c : counts)
      if (c > 0) h -= c / v.size() * std::log2(c / v.size());
    return h;
  };
  for (int bits : {2, 3, 4}) {
    CAPTURE(bits);
    const auto opt = optimal_levels(d, bits);
    const auto aff = uniform_levels(d.lo(), d.hi(), bits, QuantScheme::UniformAffine);
    CHECK(code_entropy(opt) > code_entropy(aff));
  }
}

TEST_CASE("level values quantize to themselves") {
  const auto v = gaussian_values(20000, 5);
  for (auto scheme : {QuantScheme::UniformAffine, QuantScheme::UniformScale, QuantScheme::OptimalDensity})
    for (auto rounding : {Rounding::Nearest, Rounding::Stochastic}) {
      const QuantizationSpec s = make_spec(v, scheme, 4, rounding, 3);
      const auto codes = quantize(s.levels, s);
      for (std::size_t i = 0; i < codes.size(); ++i) CHECK(codes[i] == i);
      CHECK(dequantize(codes, s) == s.levels);
      for (double l : s.levels) CHECK(static_cast<double>(static_cast<float>(l)) == l);
    }
}

TEST_CASE("nearest rounding") {
  const QuantizationSpec s{QuantScheme::UniformAffine, 2, Rounding::Nearest, {0, 1, 2, 4}, 0};
  CHECK(quantize(std::vector<double>{0.5, 1.49, 3.0, 3.01, -5, 9}, s) == std::vector<std::uint32_t>{0, 1, 2, 3, 0, 3});
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const double w = rng.uniform(-0.5, 4.5);
    const double q = s.levels[quantize(std::vector<double>{w}, s)[0]];
    for (double l : s.levels) CHECK(std::abs(w - q) <= std::abs(w - l));
    if (w >= 0 && w <= 4) {
      const auto hi = std::upper_bound(s.levels.begin(), s.levels.end(), w);
      const double gap = hi == s.levels.end() ? 0.0 : *hi - *(hi - 1);
      CHECK(std::abs(w - q) <= gap / 2 + 1e-15);
    }
  }
}

TEST_CASE("stochastic rounding probabilities") {
  const std::vector<double> half(100000, 0.75);
  const QuantizationSpec s{QuantScheme::UniformAffine, 1, Rounding::Stochastic, {0.5, 1.0}, 17};
  const auto codes = quantize(half, s);
  const double ups = static_cast<double>(std::count(codes.begin(), codes.end(), 1u)) / 1e5;
  CHECK(std::abs(ups - 0.5) < 3 * std::sqrt(0.25 / 1e5));

  const std::vector<double> w(100000, 0.7);
  const auto d = dequantize(quantize(w, s), s);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / 1e5;
  CHECK(std::abs(mean - 0.7) <= 0.005);
  CHECK(quantize(w, s) == quantize(w, s));
  QuantizationSpec other = s;
  other.seed = 18;
  CHECK_FALSE(quantize(w, other) == quantize(w, s));
}

TEST_CASE("masked positions get no code") {
  const std::vector<double> w{0.1, 0.0, 0.3, 0.0, 0.5};
  const std::vector<bool> mask{false, true, false, true, false};
  const QuantizationSpec s = make_spec(std::vector<double>{0.1, 0.3, 0.5}, QuantScheme::UniformAffine, 2, Rounding::Nearest);
  CHECK(quantize(w, mask, s).size() == 3);
  CHECK_THROWS_AS(quantize(w, std::vector<bool>(5, true), s), std::invalid_argument);
  CHECK_THROWS_AS(quantize(w, std::vector<bool>(4, false), s), std::invalid_argument);
}

TEST_CASE("dequantize rejects codes outside the table") {
  const QuantizationSpec s{QuantScheme::UniformAffine, 1, Rounding::Nearest, {0, 1}, 0};
  CHECK(dequantize(std::vector<std::uint32_t>{0, 1, 1}, s) == std::vector<double>{0, 1, 1});
  CHECK_THROWS_AS(dequantize(std::vector<std::uint32_t>{2}, s), std::out_of_range);
}

TEST_CASE("spec validation") {
  QuantizationSpec s{QuantScheme::UniformAffine, 2, Rounding::Nearest, {0, 1, 1, 2}, 0};
  CHECK_THROWS(s.validate());
  s.levels = {0, 1, 2};
  CHECK_THROWS(s.validate());
  s.levels = {0, 1, 2, 3};
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("affine spec endpoints are the float-rounded extremes") {
  const auto v = gaussian_values(1000, 6);
  const QuantizationSpec s = make_spec(v, QuantScheme::UniformAffine, 8, Rounding::Nearest);
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  CHECK(s.levels.front() == static_cast<double>(static_cast<float>(*mn)));
  CHECK(s.levels.back() == static_cast<double>(static_cast<float>(*mx)));
  CHECK(s.levels.size() == 256);
}

TEST_CASE("network quantization") {
  Network net({30});
  net.add_dense(20).add_relu().add_dense(4);
  net.initialize(3);
  SparsityMask mask(net);
  Rng rng(2);
  for (int i = 0; i < 400; ++i) mask.zero(0, rng.below(620));
  apply_mask_in_place(net, mask);

  SUBCASE("one table per parametric layer, masked zeros kept") {
    const QuantizedModel q = quantize_network(net, mask, {QuantScheme::UniformAffine, 8, Rounding::Stochastic, 1});
    CHECK(q.layers.size() == 2);
    CHECK(apply_mask(q.network, mask) == q.network);
    for (const auto& l : q.layers) CHECK(l.codes.size() == static_cast<std::size_t>(std::count(l.mask.begin(), l.mask.end(), false)));
    const QuantizedModel again = quantize_network(net, mask, {QuantScheme::UniformAffine, 8, Rounding::Stochastic, 1});
    CHECK(again.network == q.network);
  }
  SUBCASE("64-bit identity is exact") {
    const QuantizedModel q = quantize_network(net, mask, {QuantScheme::Identity, 64, Rounding::Nearest, 0});
    CHECK(q.network == net);
    const Tensor x({5, 30}, 0.3);
    const std::vector<std::size_t> labels{0, 1, 2, 3, 0};
    const auto r = quantization_report(net, q, x, labels, forward(net, x));
    CHECK(r.accuracy_after == r.accuracy_before);
    CHECK(r.divergence_after == 0.0);
    CHECK(r.lut_count == 2);
  }
  SUBCASE("per-layer overrides") {
    std::map<std::size_t, QuantConfig> over{{2, {QuantScheme::OptimalDensity, 3, Rounding::Nearest, 0}}};
    const QuantizedModel q = quantize_network(net, mask, {QuantScheme::UniformAffine, 8, Rounding::Nearest, 0}, over);
    CHECK(q.layers[0].spec.levels.size() == 256);
    CHECK(q.layers[1].spec.levels.size() == 8);
    CHECK(q.layers[1].spec.scheme == QuantScheme::OptimalDensity);
  }
  SUBCASE("a fully masked layer needs no codes") {
    SparsityMask full = SparsityMask::full(net);
    const QuantizedModel q = quantize_network(apply_mask(net, full), full, {});
    for (const auto& l : q.layers) CHECK(l.codes.empty());
  }
}

TEST_CASE("equal-mass levels") {
  const Density d = Density::from_values(gaussian_values(20000, 8), 256);
  for (int bits : {1, 2, 4, 8}) {
    const auto lv = equal_mass_levels(d, bits);
    REQUIRE(lv.size() == (std::size_t{1} << bits));
    CHECK(lv.front() == d.lo());
    CHECK(lv.back() == d.hi());
    CHECK(std::adjacent_find(lv.begin(), lv.end(), std::greater_equal<>()) == lv.end());
  }
  // Masses between consecutive levels, by midpoint quadrature.
  const auto lv = equal_mass_levels(d, 3);
  auto mass = [&](double a, double b) {
    double m = 0.0;
    for (int i = 0; i < 20000; ++i) m += d(a + (i + 0.5) * (b - a) / 20000) * (b - a) / 20000;
    return m;
  };
  for (std::size_t j = 1; j < lv.size(); ++j) CHECK(mass(lv[j - 1], lv[j]) == doctest::Approx(mass(d.lo(), d.hi()) / 7).epsilon(1e-3));
}

TEST_CASE("make_spec falls back to equal-mass levels only without a solution") {
  // Two narrow clusters far apart: the spacing condition may have no solution at 8 bits.
  Rng rng(0);
  std::vector<double> v(10000);
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) + 0.05 * rng.normal();
  for (int bits : {3, 8}) {
    bool fell_back = true;
    const QuantizationSpec s = make_spec(v, QuantScheme::OptimalDensity, bits, Rounding::Nearest, 0, &fell_back);
    const Density d = Density::from_values(v);
    bool solvable = true;
    try {
      optimal_levels(d, bits);
    } catch (const OptimalLevelsError& e) {
      solvable = false;
      CHECK(e.best_residual >= 0.0);
    }
    CHECK(fell_back == !solvable);
    if (fell_back) {
      auto expected = equal_mass_levels(d, bits);
      for (double& l : expected) l = static_cast<float>(l);
      CHECK(s.levels == expected);
    }
  }
  bool fell_back = true;
  make_spec(gaussian_values(20000, 9), QuantScheme::OptimalDensity, 4, Rounding::Nearest, 0, &fell_back);
  CHECK_FALSE(fell_back);
}
