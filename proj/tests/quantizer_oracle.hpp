#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

// Exhaustive search for the interior levels minimizing the L1 quantization
// error on a density; endpoints are pinned to [lo, hi]. Errors are built from
// prefix integrals of p and w*p on a fine grid, so each candidate costs O(levels).
struct GridOracle {
  double lo, hi, pitch;
  std::vector<double> P0, P1;  // cumulative integrals at fine resolution
  int refine;

  GridOracle(double lo_, double hi_, double pitch_, const std::function<double(double)>& p, int refine_ = 64)
      : lo(lo_), hi(hi_), pitch(pitch_), refine(refine_) {
    const long cells = std::lround((hi - lo) / pitch) * refine;
    const double h = (hi - lo) / static_cast<double>(cells);
    P0.assign(cells + 1, 0.0);
    P1.assign(cells + 1, 0.0);
    for (long i = 0; i < cells; ++i) {
      const double a = lo + h * static_cast<double>(i), b = a + h, m = 0.5 * (a + b);
      // Simpson on each cell.
      const double fa = p(a), fm = p(m), fb = p(b);
      P0[i + 1] = P0[i] + h / 6 * (fa + 4 * fm + fb);
      P1[i + 1] = P1[i] + h / 6 * (a * fa + 4 * m * fm + b * fb);
    }
  }

  // Cumulative integrals at an arbitrary point by linear interpolation on the fine grid.
  double cum(const std::vector<double>& c, double x) const {
    const double h = (hi - lo) / static_cast<double>(c.size() - 1);
    double t = (x - lo) / h;
    if (t <= 0) return c.front();
    const auto i = static_cast<std::size_t>(t);
    if (i + 1 >= c.size()) return c.back();
    t -= static_cast<double>(i);
    return c[i] + t * (c[i + 1] - c[i]);
  }

  // Integral over [x, y] of min(w - x, y - w) p(w).
  double gap_error(double x, double y) const {
    const double m = 0.5 * (x + y);
    const double left = (cum(P1, m) - cum(P1, x)) - x * (cum(P0, m) - cum(P0, x));
    const double right = y * (cum(P0, y) - cum(P0, m)) - (cum(P1, y) - cum(P1, m));
    return left + right;
  }

  double error(const std::vector<double>& levels) const {
    double e = 0.0;
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) e += gap_error(levels[i], levels[i + 1]);
    return e;
  }

  // Best two interior levels on the grid (4 levels in total).
  std::vector<double> best_two() const {
    const long n = std::lround((hi - lo) / pitch);
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> arg;
    for (long i = 1; i < n; ++i) {
      const double a = lo + pitch * static_cast<double>(i);
      const double ea = gap_error(lo, a);
      for (long j = i + 1; j < n; ++j) {
        const double b = lo + pitch * static_cast<double>(j);
        const double e = ea + gap_error(a, b) + gap_error(b, hi);
        if (e < best) {
          best = e;
          arg = {lo, a, b, hi};
        }
      }
    }
    return arg;
  }

  // Best single interior level (3 levels).
  std::vector<double> best_one() const {
    const long n = std::lround((hi - lo) / pitch);
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> arg;
    for (long i = 1; i < n; ++i) {
      const double a = lo + pitch * static_cast<double>(i);
      const double e = gap_error(lo, a) + gap_error(a, hi);
      if (e < best) {
        best = e;
        arg = {lo, a, hi};
      }
    }
    return arg;
  }
};
