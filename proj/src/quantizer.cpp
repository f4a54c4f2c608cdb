#include "devolve/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "devolve/divergence.hpp"
#include "devolve/random.hpp"

namespace devolve {

std::string to_string(QuantScheme s) {
  switch (s) {
    case QuantScheme::UniformScale: return "uniform_scale";
    case QuantScheme::UniformAffine: return "uniform_affine";
    case QuantScheme::OptimalDensity: return "optimal_density";
    case QuantScheme::Identity: return "identity";
  }
  return "unknown";
}

std::string to_string(Rounding r) { return r == Rounding::Nearest ? "nearest" : "stochastic"; }

QuantScheme parse_scheme(const std::string& s) {
  if (s == "uniform_scale") return QuantScheme::UniformScale;
  if (s == "uniform_affine") return QuantScheme::UniformAffine;
  if (s == "optimal_density") return QuantScheme::OptimalDensity;
  if (s == "identity") return QuantScheme::Identity;
  throw std::invalid_argument("unknown quantization scheme \"" + s + "\"");
}

Rounding parse_rounding(const std::string& s) {
  if (s == "nearest") return Rounding::Nearest;
  if (s == "stochastic") return Rounding::Stochastic;
  throw std::invalid_argument("unknown rounding mode \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Density

Density::Density(std::vector<double> edges, std::vector<double> masses, double floor_fraction)
    : edges_(std::move(edges)), masses_(std::move(masses)) {
  if (masses_.empty() || edges_.size() != masses_.size() + 1) throw std::invalid_argument("density needs bins+1 edges");
  for (std::size_t i = 0; i + 1 < edges_.size(); ++i)
    if (!(edges_[i + 1] > edges_[i])) throw std::invalid_argument("density edges must be strictly increasing");
  double total = 0.0;
  for (double m : masses_) {
    if (!(m >= 0.0)) throw std::invalid_argument("density masses must be nonnegative");
    total += m;
  }
  if (!(total > 0.0)) throw std::invalid_argument("density has no mass");
  for (double& m : masses_) m /= total;
  centers_.resize(masses_.size());
  heights_.resize(masses_.size());
  for (std::size_t i = 0; i < masses_.size(); ++i) {
    centers_[i] = 0.5 * (edges_[i] + edges_[i + 1]);
    heights_[i] = masses_[i] / (edges_[i + 1] - edges_[i]);
  }
  floor_ = floor_fraction * *std::max_element(heights_.begin(), heights_.end());
}

Density Density::from_values(std::span<const double> values, std::size_t bins, double floor_fraction) {
  if (values.empty()) throw std::invalid_argument("density of an empty set");
  if (bins == 0) throw std::invalid_argument("density needs at least one bin");
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn, hi = *mx;
  if (!(hi > lo)) throw std::invalid_argument("density of a degenerate range");
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  edges.back() = hi;
  std::vector<double> masses(bins, 0.0);
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    masses[std::min(b, bins - 1)] += 1.0;
  }
  return Density(std::move(edges), std::move(masses), floor_fraction);
}

Density Density::from_function(double lo, double hi, std::size_t bins, const std::function<double(double)>& f,
                               double floor_fraction) {
  if (!(hi > lo) || bins == 0) throw std::invalid_argument("invalid density range");
  std::vector<double> edges(bins + 1), masses(bins);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  edges.back() = hi;
  for (std::size_t i = 0; i < bins; ++i) masses[i] = f(0.5 * (edges[i] + edges[i + 1])) * (edges[i + 1] - edges[i]);
  return Density(std::move(edges), std::move(masses), floor_fraction);
}

Density Density::uniform(double lo, double hi, std::size_t bins) {
  return from_function(lo, hi, bins, [](double) { return 1.0; });
}

double Density::operator()(double w) const {
  double p;
  if (w <= centers_.front()) {
    p = heights_.front();
  } else if (w >= centers_.back()) {
    p = heights_.back();
  } else {
    const auto it = std::upper_bound(centers_.begin(), centers_.end(), w);
    const std::size_t j = static_cast<std::size_t>(it - centers_.begin());
    const double t = (w - centers_[j - 1]) / (centers_[j] - centers_[j - 1]);
    p = heights_[j - 1] + t * (heights_[j] - heights_[j - 1]);
  }
  return std::max(p, floor_);
}

double Density::slope(double w) const {
  if (w <= centers_.front() || w >= centers_.back()) return 0.0;
  const auto it = std::upper_bound(centers_.begin(), centers_.end(), w);
  const std::size_t j = static_cast<std::size_t>(it - centers_.begin());
  const double t = (w - centers_[j - 1]) / (centers_[j] - centers_[j - 1]);
  if (heights_[j - 1] + t * (heights_[j] - heights_[j - 1]) < floor_) return 0.0;
  return (heights_[j] - heights_[j - 1]) / (centers_[j] - centers_[j - 1]);
}

// ---------------------------------------------------------------------------
// Level construction

std::vector<double> uniform_levels(double w_min, double w_max, int bits, QuantScheme scheme) {
  if (bits < 1 || bits > 24) throw std::invalid_argument("bits must lie in [1,24]");
  if (!(w_min <= w_max)) throw std::invalid_argument("uniform_levels: w_min > w_max");
  if (w_min == w_max) return {w_min};
  const std::size_t n = std::size_t{1} << bits;
  std::vector<double> levels(n);
  if (scheme == QuantScheme::UniformAffine) {
    const double step = (w_max - w_min) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) levels[i] = w_min + step * static_cast<double>(i);
    levels.front() = w_min;
    levels.back() = w_max;
    return levels;
  }
  if (scheme != QuantScheme::UniformScale) throw std::invalid_argument("uniform_levels: scheme must be uniform");
  const double half = static_cast<double>(n / 2);
  const double denom = std::max(1.0, half - 1.0);
  const double delta = std::max(std::abs(w_min), std::abs(w_max)) / denom;
  for (std::size_t i = 0; i < n; ++i) levels[i] = (static_cast<double>(i) - half) * delta;
  return levels;
}

namespace {

struct Tridiagonal {
  std::vector<double> sub, diag, sup;  // sub[0] and sup[m-1] unused
};

// Gap sums f_j = g_j p(m_j) in coordinates where the support is [0, 1].
// The blended density p_t = (1 - t) + t q, with q the rescaled density,
// starts at the uniform case where evenly spaced levels solve the system.
struct Homotopy {
  const Density& d;
  double lo;
  double range;

  double q(double x) const { return range * d(lo + range * x); }
  double dq(double x) const { return range * range * d.slope(lo + range * x); }

  // Interior residuals F_i = f_i - f_{i+1} (i = 1..n-2), their tridiagonal
  // Jacobian in x and their derivative in t.
  void eval(const std::vector<double>& x, double t, std::vector<double>& F, Tridiagonal* J,
            std::vector<double>* Ft) const {
    const std::size_t n = x.size(), m = n - 2;
    std::vector<double> f(n), dlo(n), dhi(n), ft(n);
    for (std::size_t j = 1; j < n; ++j) {
      const double g = x[j] - x[j - 1], mid = 0.5 * (x[j] + x[j - 1]);
      const double qm = q(mid), p = (1.0 - t) + t * qm, slope = t * dq(mid);
      f[j] = g * p;
      ft[j] = g * (qm - 1.0);
      dhi[j] = p + 0.5 * g * slope;
      dlo[j] = -p + 0.5 * g * slope;
    }
    F.assign(m, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i) F[i - 1] = f[i] - f[i + 1];
    if (Ft) {
      Ft->assign(m, 0.0);
      for (std::size_t i = 1; i + 1 < n; ++i) (*Ft)[i - 1] = ft[i] - ft[i + 1];
    }
    if (J) {
      J->sub.assign(m, 0.0);
      J->diag.assign(m, 0.0);
      J->sup.assign(m, 0.0);
      for (std::size_t i = 1; i + 1 < n; ++i) {
        const std::size_t r = i - 1;
        if (i > 1) J->sub[r] = dlo[i];
        J->diag[r] = dhi[i] - dlo[i + 1];
        if (i + 2 < n) J->sup[r] = -dhi[i + 1];
      }
    }
  }
};

double max_abs(const std::vector<double>& v) {
  double worst = 0.0;
  for (double x : v) worst = std::max(worst, std::abs(x));
  return worst;
}

bool increasing(const std::vector<double>& l) {
  for (std::size_t i = 1; i < l.size(); ++i)
    if (!(l[i] > l[i - 1])) return false;
  return true;
}

// Gaussian elimination with partial pivoting; false when singular.
bool solve_dense(std::vector<double> a, std::vector<double>& b, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a[i * n + k]) > std::abs(a[piv * n + k])) piv = i;
    if (a[piv * n + k] == 0.0) return false;
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[piv * n + j]);
      std::swap(b[k], b[piv]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double w = a[i * n + k] / a[k * n + k];
      if (w == 0.0) continue;
      for (std::size_t j = k; j < n; ++j) a[i * n + j] -= w * a[k * n + j];
      b[i] -= w * b[k];
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t j = k + 1; j < n; ++j) s -= a[k * n + j] * b[j];
    b[k] = s / a[k * n + k];
  }
  return std::all_of(b.begin(), b.end(), [](double v) { return std::isfinite(v); });
}

// Solves J x = b for several right-hand sides by elimination with
// partial pivoting (the factor gains a second superdiagonal).
bool solve_tridiagonal(const Tridiagonal& J, std::vector<std::vector<double>*> rhs) {
  const std::size_t m = J.diag.size();
  std::vector<double> dl(J.sub), d(J.diag), du(J.sup), du2(m, 0.0);
  double scale = 0.0;
  for (std::size_t i = 0; i < m; ++i) scale = std::max({scale, std::abs(d[i]), std::abs(dl[i]), std::abs(du[i])});
  auto swap_rows = [&](std::size_t i) {
    for (auto* b : rhs) std::swap((*b)[i], (*b)[i + 1]);
  };
  for (std::size_t i = 0; i + 1 < m; ++i) {
    const double below = dl[i + 1];
    if (std::abs(d[i]) >= std::abs(below)) {
      if (d[i] == 0.0) return false;
      const double w = below / d[i];
      d[i + 1] -= w * du[i];
      for (auto* b : rhs) (*b)[i + 1] -= w * (*b)[i];
    } else {
      // Swap rows i and i+1.
      const double w = d[i] / below;
      d[i] = below;
      const double tmp = d[i + 1];
      d[i + 1] = du[i] - w * tmp;
      du[i] = tmp;
      if (i + 2 < m) {
        du2[i] = du[i + 1];
        du[i + 1] = -w * du2[i];
      }
      swap_rows(i);
      for (auto* b : rhs) (*b)[i + 1] -= w * (*b)[i];
    }
  }
  if (std::abs(d[m - 1]) <= 1e-14 * scale) return false;
  for (auto* b : rhs) {
    auto& x = *b;
    x[m - 1] /= d[m - 1];
    if (m > 1) x[m - 2] = (x[m - 2] - du[m - 2] * x[m - 1]) / d[m - 2];
    for (std::size_t i = m - 2; i-- > 0;) x[i] = (x[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / d[i];
    for (double v : x)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// Unknowns y = (x_1..x_{n-2}, t); solves [J Ft; row] y = rhs in place.
bool solve_bordered(const Tridiagonal& J, const std::vector<double>& Ft, const std::vector<double>& row,
                    std::vector<double>& rhs) {
  const std::size_t m = J.diag.size();
  std::vector<double> a(rhs.begin(), rhs.begin() + static_cast<std::ptrdiff_t>(m)), b(Ft);
  if (solve_tridiagonal(J, {&a, &b})) {
    double ra = 0.0, rb = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      ra += row[i] * a[i];
      rb += row[i] * b[i];
    }
    const double den = row[m] - rb;
    if (std::abs(den) > 1e-12 * (std::abs(row[m]) + std::abs(rb))) {
      const double z = (rhs[m] - ra) / den;
      for (std::size_t i = 0; i < m; ++i) rhs[i] = a[i] - b[i] * z;
      rhs[m] = z;
      if (std::isfinite(z)) return true;
    }
  }
  // J singular or nearly so: eliminate the full bordered matrix.
  const std::size_t k = m + 1;
  std::vector<double> dense(k * k, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (i > 0) dense[i * k + i - 1] = J.sub[i];
    dense[i * k + i] = J.diag[i];
    if (i + 1 < m) dense[i * k + i + 1] = J.sup[i];
    dense[i * k + m] = Ft[i];
  }
  for (std::size_t j = 0; j < k; ++j) dense[m * k + j] = row[j];
  return solve_dense(std::move(dense), rhs, k);
}

struct Point {
  std::vector<double> x;  // all n levels, x[0] = 0 and x[n-1] = 1
  double t = 0.0;
};

// Newton corrector on F = 0 plus one linear constraint row . (y - anchor) = 0.
bool correct(const Homotopy& h, Point& p, const std::vector<double>& row, const std::vector<double>& anchor,
             double tol) {
  const std::size_t n = p.x.size(), m = n - 2;
  std::vector<double> F, Ft;
  Tridiagonal J;
  for (int it = 0; it < 30; ++it) {
    h.eval(p.x, p.t, F, &J, &Ft);
    const double c = std::abs(p.x[1] * ((1.0 - p.t) + p.t * h.q(0.5 * p.x[1])));
    if (max_abs(F) <= tol * std::max(c, 1e-300)) return increasing(p.x);
    std::vector<double> rhs(m + 1);
    for (std::size_t i = 0; i < m; ++i) rhs[i] = -F[i];
    double g = 0.0;
    for (std::size_t i = 0; i < m; ++i) g += row[i] * (p.x[i + 1] - anchor[i]);
    g += row[m] * (p.t - anchor[m]);
    rhs[m] = -g;
    if (!solve_bordered(J, Ft, row, rhs)) return false;
    for (std::size_t i = 0; i < m; ++i) p.x[i + 1] += rhs[i];
    p.t += rhs[m];
    if (!increasing(p.x)) return false;
  }
  return false;
}

// Damped Newton at t = 1 with backtracking on the squared residual.
bool polish(const Homotopy& h, Point& p, double tol) {
  const std::size_t n = p.x.size(), m = n - 2;
  std::vector<double> F, trial_F;
  Tridiagonal J;
  h.eval(p.x, 1.0, F, &J, nullptr);
  double norm = 0.0;
  for (double v : F) norm += v * v;
  for (int it = 0; it < 200; ++it) {
    double c = 0.0;
    for (std::size_t j = 1; j < n; ++j) c += (p.x[j] - p.x[j - 1]) * h.q(0.5 * (p.x[j] + p.x[j - 1]));
    c /= static_cast<double>(n - 1);
    if (max_abs(F) <= tol * c) return true;
    std::vector<double> delta(F);
    for (double& v : delta) v = -v;
    if (!solve_tridiagonal(J, {&delta})) return false;
    bool accepted = false;
    double step = 1.0;
    for (int ls = 0; ls < 40 && !accepted; ++ls, step *= 0.5) {
      Point trial = p;
      for (std::size_t i = 0; i < m; ++i) trial.x[i + 1] += step * delta[i];
      if (!increasing(trial.x)) continue;
      h.eval(trial.x, 1.0, trial_F, nullptr, nullptr);
      double tn = 0.0;
      for (double v : trial_F) tn += v * v;
      if (tn < norm) {
        p = std::move(trial);
        norm = tn;
        accepted = true;
      }
    }
    if (!accepted) return false;
    h.eval(p.x, 1.0, F, &J, nullptr);
  }
  return false;
}

// One Gauss-Seidel sweep: each interior level moves toward a root of
// f_i - f_{i+1} between its neighbours, which always brackets a sign change.
void relax(const Homotopy& h, Point& p) {
  const std::size_t n = p.x.size();
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double a = p.x[i - 1], b = p.x[i + 1];
    auto diff = [&](double l) { return (l - a) * h.q(0.5 * (a + l)) - (b - l) * h.q(0.5 * (l + b)); };
    double lo = a, hi = b;
    for (int k = 0; k < 60; ++k) {
      const double mid = 0.5 * (lo + hi);
      if (diff(mid) < 0.0) lo = mid;
      else hi = mid;
    }
    // Half steps; full steps can fall into a two-cycle between roots.
    const double l = 0.5 * (p.x[i] + 0.5 * (lo + hi));
    if (l > a && l < b) p.x[i] = l;
  }
}

// Newton, then rounds of relaxation each followed by another Newton try.
bool settle(const Homotopy& h, Point& start, int rounds, int sweeps, double tol) {
  if (polish(h, start, tol)) return true;
  for (int round = 0; round < rounds; ++round) {
    for (int sweep = 0; sweep < sweeps; ++sweep) relax(h, start);
    Point trial = start;
    if (polish(h, trial, tol)) {
      start = std::move(trial);
      return true;
    }
  }
  return false;
}

// Unit tangent of the solution curve, oriented along `previous`.
bool tangent(const Homotopy& h, const Point& p, const std::vector<double>& previous, std::vector<double>& tau) {
  const std::size_t m = p.x.size() - 2;
  std::vector<double> F, Ft;
  Tridiagonal J;
  h.eval(p.x, p.t, F, &J, &Ft);
  std::vector<double> rhs(m + 1, 0.0);
  rhs[m] = 1.0;
  if (!solve_bordered(J, Ft, previous, rhs)) return false;
  double norm = 0.0;
  for (double v : rhs) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) return false;
  for (double& v : rhs) v /= norm;
  tau = std::move(rhs);
  return true;
}

// Tangent of the neighbouring piece just past p along tau, oriented so the
// levels keep moving the same way.
bool cross_crease(const Homotopy& h, const Point& p, std::vector<double>& tau) {
  const std::size_t m = p.x.size() - 2;
  std::vector<double> row(tau);
  row[m] = 0.0;
  for (double eps : {1e-8, 1e-7, 1e-6}) {
    Point probe = p;
    for (std::size_t i = 0; i < m; ++i) probe.x[i + 1] += eps * tau[i];
    probe.t += eps * tau[m];
    std::vector<double> z;
    if (!tangent(h, probe, row, z)) continue;
    double dot = 0.0;
    for (std::size_t i = 0; i <= m; ++i) dot += z[i] * tau[i];
    if (std::abs(dot) > 1.0 - 1e-12) continue;  // same piece
    tau = std::move(z);
    return true;
  }
  return false;
}

// Levels splitting q^power into equal masses, at t = 1.
Point mass_quantiles(const Homotopy& h, std::size_t n, double power) {
  constexpr std::size_t kCells = 1 << 16;
  std::vector<double> cum(kCells + 1, 0.0);
  for (std::size_t i = 0; i < kCells; ++i) cum[i + 1] = cum[i] + std::pow(h.q((static_cast<double>(i) + 0.5) / kCells), power);
  Point p;
  p.t = 1.0;
  p.x.assign(n, 0.0);
  p.x.back() = 1.0;
  std::size_t cell = 0;
  for (std::size_t k = 1; k + 1 < n; ++k) {
    const double target = cum.back() * static_cast<double>(k) / static_cast<double>(n - 1);
    while (cell < kCells && cum[cell + 1] < target) ++cell;
    const double inside = cum[cell + 1] > cum[cell] ? (target - cum[cell]) / (cum[cell + 1] - cum[cell]) : 0.5;
    p.x[k] = std::max((static_cast<double>(cell) + inside) / kCells, std::nextafter(p.x[k - 1], 2.0));
  }
  return p;
}

}  // namespace

OptimalLevels optimal_levels_solve(const Density& density, int bits) {
  if (bits < 1 || bits > 16) throw std::invalid_argument("optimal_levels: bits must lie in [1,16]");
  const std::size_t n = std::size_t{1} << bits;
  const double lo = density.lo(), hi = density.hi(), range = hi - lo;
  if (n == 2) return {{lo, hi}, range * density(0.5 * (lo + hi))};

  // Pseudo-arclength continuation from t = 0 to t = 1; it follows the
  // solution curve around folds where plain stepping in t stalls.
  constexpr double kTol = 1e-12;
  const std::size_t m = n - 2;
  const Homotopy h{density, lo, range};
  Point p;
  p.x.resize(n);
  for (std::size_t i = 0; i < n; ++i) p.x[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  p.x.back() = 1.0;

  std::vector<double> tau(m + 1, 0.0), unit_t(m + 1, 0.0);
  unit_t[m] = 1.0;

  // Newton from equal-mass quantiles of powers of the density, each
  // followed by rounds of relaxation; continuation in t is the last resort.
  bool done = false;
  for (double power : {1.0, 0.75, 1.25, 0.5, 1.5}) {
    Point start = mass_quantiles(h, n, power);
    done = settle(h, start, 5, 100, kTol);
    if (done) {
      p = std::move(start);
      break;
    }
  }
  // Refine the solution for one bit less: split each gap where its two
  // halves carry equal gap * density products.
  if (!done && bits > 2) {
    try {
      const OptimalLevels coarse = optimal_levels_solve(density, bits - 1);
      Point start;
      start.t = 1.0;
      for (std::size_t j = 0; j < coarse.levels.size(); ++j) {
        const double x = (coarse.levels[j] - lo) / range;
        if (j > 0) {
          const double a = start.x.back();
          double l = a, r = x;
          for (int k = 0; k < 60; ++k) {
            const double mid = 0.5 * (l + r);
            if ((mid - a) * h.q(0.5 * (a + mid)) < (x - mid) * h.q(0.5 * (mid + x))) l = mid;
            else r = mid;
          }
          start.x.push_back(0.5 * (l + r));
        }
        start.x.push_back(x);
      }
      start.x.front() = 0.0;
      start.x.back() = 1.0;
      // 2^(b-1) - 1 gaps give one level too few; split the heaviest gap once more.
      std::size_t heaviest = 1;
      double weight = 0.0;
      for (std::size_t j = 1; j < start.x.size(); ++j) {
        const double f = (start.x[j] - start.x[j - 1]) * h.q(0.5 * (start.x[j] + start.x[j - 1]));
        if (f > weight) {
          weight = f;
          heaviest = j;
        }
      }
      start.x.insert(start.x.begin() + static_cast<std::ptrdiff_t>(heaviest),
                     0.5 * (start.x[heaviest - 1] + start.x[heaviest]));
      if (increasing(start.x) && settle(h, start, 5, 100, kTol)) {
        p = std::move(start);
        done = true;
      }
    } catch (const OptimalLevelsError&) {
    }
  }

  // Random starts; the solutions of noisy densities can sit far from any quantile layout.
  Rng rng(0x5eed);
  const int attempts = n <= 16 ? 200 : 20;
  for (int attempt = 0; attempt < attempts && !done; ++attempt) {
    Point start;
    start.t = 1.0;
    start.x.resize(n);
    for (std::size_t i = 1; i + 1 < n; ++i) start.x[i] = rng.uniform();
    start.x.back() = 1.0;
    std::sort(start.x.begin() + 1, start.x.end() - 1);
    if (!increasing(start.x)) continue;
    done = settle(h, start, 2, 50, kTol);
    if (done) p = std::move(start);
  }
  if (!done && !tangent(h, p, unit_t, tau))
    throw OptimalLevelsError("optimal_levels: singular system at the uniform start", 0.0);

  double step = 0.05, best_t = 0.0;
  int jumps = 0;
  for (int iter = 0; iter < 4000 && !done; ++iter) {
    if (step < 1e-9) {
      // Stalled at a crease of the piecewise-linear density. The curve goes
      // on in the neighbouring piece, possibly backwards in t; take its
      // tangent just across the crease and keep moving the levels forward.
      if (++jumps > 100 || !cross_crease(h, p, tau)) break;
      step = 1e-6;
      continue;
    }
    Point q = p;
    for (std::size_t i = 0; i < m; ++i) q.x[i + 1] += step * tau[i];
    q.t += step * tau[m];
    if (!increasing(q.x)) {
      step *= 0.5;
      continue;
    }
    if (q.t >= 1.0) {
      // Land exactly on t = 1.
      const double frac = (1.0 - p.t) / (q.t - p.t);
      Point end = p;
      for (std::size_t i = 1; i + 1 < n; ++i) end.x[i] += frac * (q.x[i] - p.x[i]);
      end.t = 1.0;
      std::vector<double> anchor(m + 1);
      for (std::size_t i = 0; i < m; ++i) anchor[i] = end.x[i + 1];
      anchor[m] = 1.0;
      if (correct(h, end, unit_t, anchor, kTol)) {
        p = std::move(end);
        done = true;
      } else {
        step *= 0.5;
      }
      continue;
    }
    std::vector<double> anchor(m + 1);
    for (std::size_t i = 0; i < m; ++i) anchor[i] = q.x[i + 1];
    anchor[m] = q.t;
    std::vector<double> next_tau;
    if (correct(h, q, tau, anchor, kTol) && q.t >= 0.0 && tangent(h, q, tau, next_tau)) {
      double dot = 0.0;
      for (std::size_t i = 0; i <= m; ++i) dot += next_tau[i] * tau[i];
      if (dot < 0.5) {
        // Too sharp a turn for this step size.
        step *= 0.5;
        continue;
      }
      p = std::move(q);
      tau = std::move(next_tau);
      best_t = std::max(best_t, p.t);
      step = std::min(0.25, step * 1.5);
    } else {
      step *= 0.5;
    }
  }
  if (!done) {
    std::vector<double> F;
    h.eval(p.x, p.t, F, nullptr, nullptr);
    throw OptimalLevelsError("optimal_levels: continuation stalled at blend " + std::to_string(best_t) +
                                 "; no level set satisfies the spacing condition",
                             max_abs(F));
  }
  std::vector<double> levels(n);
  for (std::size_t i = 0; i < n; ++i) levels[i] = lo + range * p.x[i];
  levels.front() = lo;
  levels.back() = hi;
  double c = 0.0;
  for (std::size_t j = 1; j < n; ++j) c += (levels[j] - levels[j - 1]) * density(0.5 * (levels[j - 1] + levels[j]));
  return {std::move(levels), c / static_cast<double>(n - 1)};
}

std::vector<double> optimal_levels(const Density& density, int bits) { return optimal_levels_solve(density, bits).levels; }

std::vector<double> equal_mass_levels(const Density& density, int bits) {
  if (bits < 1 || bits > 16) throw std::invalid_argument("equal_mass_levels: bits must lie in [1,16]");
  const std::size_t n = std::size_t{1} << bits;
  const double lo = density.lo(), range = density.hi() - lo;
  const Point p = mass_quantiles(Homotopy{density, lo, range}, n, 1.0);
  std::vector<double> levels(n);
  for (std::size_t i = 0; i < n; ++i) levels[i] = lo + range * p.x[i];
  levels.front() = lo;
  levels.back() = density.hi();
  for (std::size_t i = 1; i < n; ++i)
    if (!(levels[i] > levels[i - 1])) levels[i] = std::nextafter(levels[i - 1], INFINITY);
  return levels;
}

double max_interior_residual(std::span<const double> levels, const Density& density) {
  double worst = 0.0;
  for (std::size_t i = 1; i + 1 < levels.size(); ++i) {
    const double k = levels[i - 1], l = levels[i], m = levels[i + 1];
    const double r = std::abs((l - k) * density(0.5 * (k + l)) - (m - l) * density(0.5 * (l + m)));
    worst = std::max(worst, r);
  }
  return worst;
}

double quantization_error(std::span<const double> levels, const Density& density) {
  if (levels.empty()) throw std::invalid_argument("quantization_error: no levels");
  constexpr int kSub = 16;
  double total = 0.0;
  const auto& edges = density.edges();
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    const double h = (edges[b + 1] - edges[b]) / kSub;
    for (int s = 0; s < kSub; ++s) {
      const double w = edges[b] + (s + 0.5) * h;
      const double q = levels[nearest_code(levels, w)];
      total += std::abs(w - q) * density(w) * h;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Specs and rounding

void QuantizationSpec::validate() const {
  if (scheme == QuantScheme::Identity) return;
  if (levels.empty()) throw std::invalid_argument("quantization spec has no levels");
  if (levels.size() != (std::size_t{1} << bits)) {
    throw std::invalid_argument("quantization spec: " + std::to_string(levels.size()) + " levels for " +
                                std::to_string(bits) + " bits");
  }
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (!(levels[i] > levels[i - 1])) throw std::invalid_argument("quantization levels must be strictly increasing");
}

QuantizationSpec make_spec(std::span<const double> values, QuantScheme scheme, int bits, Rounding rounding,
                           std::uint64_t seed, bool* fell_back) {
  if (fell_back) *fell_back = false;
  if (values.empty()) throw std::invalid_argument("make_spec: no values to quantize");
  QuantizationSpec spec{scheme, bits, rounding, {}, seed};
  if (scheme == QuantScheme::Identity) {
    spec.bits = 32;
    return spec;
  }
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  if (*mn == *mx) {
    spec.bits = 0;
    spec.levels = {static_cast<double>(static_cast<float>(*mn))};
    return spec;
  }
  if (scheme == QuantScheme::OptimalDensity) {
    const Density d = Density::from_values(values);
    try {
      spec.levels = optimal_levels(d, bits);
    } catch (const OptimalLevelsError&) {
      spec.levels = equal_mass_levels(d, bits);
      if (fell_back) *fell_back = true;
    }
  } else {
    spec.levels = uniform_levels(*mn, *mx, bits, scheme);
  }
  for (std::size_t i = 0; i < spec.levels.size(); ++i) {
    double f = static_cast<float>(spec.levels[i]);
    if (i > 0 && f <= spec.levels[i - 1]) f = std::nextafter(static_cast<float>(spec.levels[i - 1]), INFINITY);
    spec.levels[i] = f;
  }
  spec.validate();
  return spec;
}

std::uint32_t nearest_code(std::span<const double> levels, double w) {
  if (w <= levels.front()) return 0;
  if (w >= levels.back()) return static_cast<std::uint32_t>(levels.size() - 1);
  const auto hi = static_cast<std::size_t>(std::upper_bound(levels.begin(), levels.end(), w) - levels.begin());
  const std::size_t lo = hi - 1;
  return static_cast<std::uint32_t>(w - levels[lo] <= levels[hi] - w ? lo : hi);
}

namespace {

std::vector<std::uint32_t> quantize_impl(std::span<const double> weights, const std::vector<bool>* mask,
                                         const QuantizationSpec& spec) {
  if (spec.scheme == QuantScheme::Identity) throw std::invalid_argument("identity scheme has no codes");
  spec.validate();
  if (mask && mask->size() != weights.size()) throw std::invalid_argument("quantize: mask size mismatch");
  const auto& lv = spec.levels;
  Rng rng(spec.seed);
  std::vector<std::uint32_t> codes;
  codes.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (mask && (*mask)[i]) continue;
    const double w = weights[i];
    if (spec.rounding == Rounding::Nearest || w <= lv.front() || w >= lv.back()) {
      codes.push_back(nearest_code(lv, w));
      continue;
    }
    const auto hi = static_cast<std::size_t>(std::upper_bound(lv.begin(), lv.end(), w) - lv.begin());
    const std::size_t lo = hi - 1;
    const double p_up = (w - lv[lo]) / (lv[hi] - lv[lo]);
    codes.push_back(static_cast<std::uint32_t>(rng.uniform() < p_up ? hi : lo));
  }
  if (codes.empty()) throw std::invalid_argument("quantize: no surviving weights");
  return codes;
}

}  // namespace

std::vector<std::uint32_t> quantize(std::span<const double> weights, const std::vector<bool>& mask,
                                    const QuantizationSpec& spec) {
  return quantize_impl(weights, &mask, spec);
}

std::vector<std::uint32_t> quantize(std::span<const double> weights, const QuantizationSpec& spec) {
  return quantize_impl(weights, nullptr, spec);
}

std::vector<double> dequantize(std::span<const std::uint32_t> codes, const QuantizationSpec& spec) {
  std::vector<double> out;
  out.reserve(codes.size());
  for (std::uint32_t c : codes) {
    if (c >= spec.levels.size()) {
      throw std::out_of_range("code " + std::to_string(c) + " outside LUT of " + std::to_string(spec.levels.size()));
    }
    out.push_back(spec.levels[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network quantization

std::vector<double> layer_values(const Layer& layer) {
  std::vector<double> v;
  for (const auto& t : layer.params) v.insert(v.end(), t.data().begin(), t.data().end());
  return v;
}

std::vector<bool> layer_mask(const SparsityMask& mask, std::size_t layer) {
  std::vector<bool> m;
  for (std::size_t t = 0; t < mask.tensor_count(layer); ++t) {
    const auto& b = mask.bits(layer, t);
    m.insert(m.end(), b.begin(), b.end());
  }
  return m;
}

void restore_layer(Layer& layer, const QuantizedLayer& q) {
  std::size_t total = 0;
  for (const auto& t : layer.params) total += t.size();
  if (q.mask.size() != total) throw std::invalid_argument("quantized layer size does not match " + layer.name(q.layer));
  const bool identity = q.spec.scheme == QuantScheme::Identity;
  const std::size_t survivors = identity ? q.raw.size() : q.codes.size();
  if (static_cast<std::size_t>(std::count(q.mask.begin(), q.mask.end(), false)) != survivors) {
    throw std::invalid_argument("quantized layer code count does not match its mask");
  }
  std::size_t flat = 0, next = 0;
  for (auto& t : layer.params) {
    for (double& w : t.data()) {
      if (q.mask[flat++]) {
        w = 0.0;
      } else if (identity) {
        w = q.raw[next++];
      } else {
        const std::uint32_t c = q.codes[next++];
        if (c >= q.spec.levels.size()) throw std::out_of_range("code outside LUT");
        w = q.spec.levels[c];
      }
    }
  }
}

QuantizedModel quantize_network(const Network& student, const SparsityMask& mask, const QuantConfig& config,
                                const std::map<std::size_t, QuantConfig>& overrides) {
  mask.check_matches(student);
  QuantizedModel out{student, {}};
  for (std::size_t l : student.parametric_layers()) {
    const auto it = overrides.find(l);
    const QuantConfig& cfg = it == overrides.end() ? config : it->second;
    const Layer& layer = student.layers()[l];
    QuantizedLayer q;
    q.layer = l;
    for (const auto& t : layer.params) q.shapes.push_back(t.shape());
    q.mask = layer_mask(mask, l);
    const auto values = layer_values(layer);
    std::vector<double> survivors;
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!q.mask[i]) survivors.push_back(values[i]);

    const std::uint64_t seed = stream_seed(cfg.seed, {0x9a47, l});
    if (cfg.scheme == QuantScheme::Identity) {
      // 64 keeps doubles untouched; anything else stores floats.
      const int width = cfg.bits == 64 ? 64 : 32;
      q.spec = QuantizationSpec{QuantScheme::Identity, width, cfg.rounding, {}, seed};
      q.raw = survivors;
      if (width == 32)
        for (double& v : q.raw) v = static_cast<float>(v);
    } else if (survivors.empty()) {
      q.spec = QuantizationSpec{cfg.scheme, 0, cfg.rounding, {0.0}, seed};
    } else {
      bool fell_back = false;
      q.spec = make_spec(survivors, cfg.scheme, cfg.bits, cfg.rounding, seed, &fell_back);
      if (fell_back) out.fallback_layers.push_back(l);
      q.codes = quantize(survivors, q.spec);
    }
    restore_layer(out.network.layers()[l], q);
    out.layers.push_back(std::move(q));
  }
  return out;
}

QuantizationReport quantization_report(const Network& before, const QuantizedModel& after, const Tensor& inputs,
                                       std::span<const std::size_t> labels,
                                       const std::optional<Tensor>& reference_outputs) {
  QuantizationReport r;
  r.lut_count = after.layers.size();
  if (!labels.empty()) {
    r.accuracy_before = accuracy(before, inputs, labels);
    r.accuracy_after = accuracy(after.network, inputs, labels);
  }
  if (reference_outputs) {
    const DivergenceSpec whole;
    r.divergence_before = divergence(forward(before, inputs), *reference_outputs, whole);
    r.divergence_after = divergence(forward(after.network, inputs), *reference_outputs, whole);
  }
  return r;
}

}  // namespace devolve
