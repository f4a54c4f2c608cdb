#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "devolve/network.hpp"
#include "devolve/sparsity.hpp"

namespace devolve {

enum class QuantScheme { UniformScale, UniformAffine, OptimalDensity, Identity };
enum class Rounding { Nearest, Stochastic };

std::string to_string(QuantScheme s);
std::string to_string(Rounding r);
QuantScheme parse_scheme(const std::string& s);
Rounding parse_rounding(const std::string& s);

/// Piecewise density over [lo, hi]: bin masses normalized to 1, evaluated
/// by linear interpolation of bin heights between bin centers and floored
/// at a fraction of the peak height.
class Density {
 public:
  Density(std::vector<double> edges, std::vector<double> masses, double floor_fraction = 1e-6);

  /// Histogram density of the values (min..max, equal-width bins).
  static Density from_values(std::span<const double> values, std::size_t bins = 256, double floor_fraction = 1e-6);
  /// Bins of `f` sampled at bin centers (f need not be normalized).
  static Density from_function(double lo, double hi, std::size_t bins, const std::function<double(double)>& f,
                               double floor_fraction = 1e-6);
  static Density uniform(double lo, double hi, std::size_t bins = 256);

  double lo() const { return edges_.front(); }
  double hi() const { return edges_.back(); }
  std::size_t bins() const { return masses_.size(); }
  const std::vector<double>& edges() const { return edges_; }
  const std::vector<double>& masses() const { return masses_; }
  double floor() const { return floor_; }

  double operator()(double w) const;
  /// Derivative of operator() (0 where the floor applies).
  double slope(double w) const;

 private:
  std::vector<double> edges_;
  std::vector<double> masses_;
  std::vector<double> centers_;
  std::vector<double> heights_;
  double floor_ = 0.0;
};

/// Levels for a uniform scheme. Affine: 2^bits equally spaced values with
/// endpoints exactly w_min and w_max. Scale: i * delta for signed codes
/// i in [-2^(bits-1), 2^(bits-1) - 1], delta = max(|w_min|, |w_max|) / (2^(bits-1) - 1)
/// (denominator 1 when bits == 1). A degenerate range yields the single level {w_min}.
std::vector<double> uniform_levels(double w_min, double w_max, int bits, QuantScheme scheme);

struct OptimalLevelsError : std::runtime_error {
  OptimalLevelsError(const std::string& what, double residual) : std::runtime_error(what), best_residual(residual) {}
  double best_residual;
};

struct OptimalLevels {
  std::vector<double> levels;
  double constant = 0.0;  // common value of gap * p(gap midpoint)
};

/// Levels pinned to the density's endpoints whose every gap satisfies
/// gap * p(gap midpoint) == constant, i.e. spacing inversely proportional to
/// the density at the middle of each gap. Newton iteration from several
/// starting layouts, then continuation from the uniform density. Throws
/// OptimalLevelsError when no solution is found; noisy histograms can have
/// none near any start.
OptimalLevels optimal_levels_solve(const Density& density, int bits);
std::vector<double> optimal_levels(const Density& density, int bits);

/// Levels pinned to the endpoints that split the density into 2^bits - 1
/// equal masses. Used in place of optimal_levels when that has no solution.
std::vector<double> equal_mass_levels(const Density& density, int bits);

/// Largest |(l-k) p((k+l)/2) - (m-l) p((l+m)/2)| over interior triples.
double max_interior_residual(std::span<const double> levels, const Density& density);

/// Integral of |w - nearest level| p(w) over the density support
/// (16-point midpoint rule per density bin).
double quantization_error(std::span<const double> levels, const Density& density);

struct QuantizationSpec {
  QuantScheme scheme = QuantScheme::UniformAffine;
  int bits = 8;  // 0 marks a degenerate single-level table
  Rounding rounding = Rounding::Nearest;
  std::vector<double> levels;  // the LUT, strictly increasing
  std::uint64_t seed = 0;

  bool degenerate() const { return levels.size() == 1; }
  void validate() const;
  friend bool operator==(const QuantizationSpec&, const QuantizationSpec&) = default;
};

/// Builds the LUT for `values` under a scheme. Levels are rounded to the
/// nearest float so the table serializes exactly.
/// For OptimalDensity, falls back to equal_mass_levels when the spacing
/// condition has no solution and sets *fell_back.
QuantizationSpec make_spec(std::span<const double> values, QuantScheme scheme, int bits, Rounding rounding,
                           std::uint64_t seed = 0, bool* fell_back = nullptr);

/// Index of the nearest level (midpoint ties go to the lower level); values
/// beyond the table clip to its ends.
std::uint32_t nearest_code(std::span<const double> levels, double w);

/// One code per surviving (unmasked) weight, in flat order.
std::vector<std::uint32_t> quantize(std::span<const double> weights, const std::vector<bool>& mask,
                                    const QuantizationSpec& spec);
std::vector<std::uint32_t> quantize(std::span<const double> weights, const QuantizationSpec& spec);

std::vector<double> dequantize(std::span<const std::uint32_t> codes, const QuantizationSpec& spec);

struct QuantConfig {
  QuantScheme scheme = QuantScheme::UniformAffine;
  int bits = 8;
  Rounding rounding = Rounding::Stochastic;
  std::uint64_t seed = 0;
};

/// Quantized parameters of one parametric layer. The layer's tensors are
/// concatenated (weights, then bias) into one flat vector with one mask,
/// one LUT and one code stream.
struct QuantizedLayer {
  std::size_t layer = 0;
  std::vector<Shape> shapes;
  std::vector<bool> mask;
  QuantizationSpec spec;
  std::vector<std::uint32_t> codes;  // LUT schemes
  std::vector<double> raw;           // Identity scheme: surviving values (rounded to float unless bits == 64)

  std::size_t size() const { return mask.size(); }
  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedModel {
  Network network;  // dequantized weights
  std::vector<QuantizedLayer> layers;
  std::vector<std::size_t> fallback_layers;  // OptimalDensity layers given equal-mass levels
};

struct QuantizationReport {
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  double divergence_before = 0.0;  // vs reference outputs, when given
  double divergence_after = 0.0;
  std::size_t lut_count = 0;
};

/// Flattened parameters and mask of one layer.
std::vector<double> layer_values(const Layer& layer);
std::vector<bool> layer_mask(const SparsityMask& mask, std::size_t layer);

/// Rebuilds a layer's parameter tensors from its quantized form.
void restore_layer(Layer& layer, const QuantizedLayer& q);

/// Quantizes every parametric layer with its own LUT. `overrides` replaces
/// the configuration per layer index.
QuantizedModel quantize_network(const Network& student, const SparsityMask& mask, const QuantConfig& config,
                                const std::map<std::size_t, QuantConfig>& overrides = {});

/// Accuracy on a labelled evaluation set before/after, and divergence to
/// `reference_outputs` (typically the teacher's) on the same inputs.
QuantizationReport quantization_report(const Network& before, const QuantizedModel& after, const Tensor& inputs,
                                       std::span<const std::size_t> labels,
                                       const std::optional<Tensor>& reference_outputs);

}  // namespace devolve
