#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "devolve/tensor.hpp"

namespace devolve {

/// Inputs with optional class labels. Used both for full datasets and for
/// the small probe sets that drive sparsification.
struct Dataset {
  Tensor inputs;                    // [n, ...]
  std::vector<std::size_t> labels;  // empty or one per sample
  std::string provenance;

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  bool has_labels() const { return !labels.empty(); }
  Tensor label_tensor() const;
};
using ProbeSet = Dataset;

// IDX: big-endian magic 0x0000 08 <rank>, rank big-endian u32 dims, unsigned bytes.
inline constexpr std::uint32_t kIdxLabels = 0x00000801;
inline constexpr std::uint32_t kIdxImages = 0x00000803;

/// Rank-1 files parse to raw class values [n]; higher ranks to [n, ...]
/// scaled to [0,1] by /255.
Tensor parse_idx(std::span<const std::uint8_t> bytes);

/// Inverse of parse_idx. Values are rounded to the nearest byte (after *255
/// for rank > 1).
std::vector<std::uint8_t> serialize_idx(const Tensor& t);

/// Reads an IDX file, plain or gzip-wrapped.
Tensor load_idx_file(const std::string& path);

/// IDX image + label file pair as a dataset; images are flattened per sample.
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);

enum class SyntheticKind { Blobs, Rings };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Blobs;
  std::size_t n = 1000;
  std::size_t classes = 10;
  std::size_t dim = 784;  // rings use the first two coordinates
  double noise = 1.0;     // blobs: per-coordinate std; rings: radial std
  std::uint64_t seed = 0;
};

/// Class-balanced (counts within +-1) labelled samples, a pure function of the spec.
/// Blobs: Gaussian clouds around N(0,1) centers. Rings: concentric circles of radius class+1.
Dataset synthetic_dataset(const SyntheticSpec& spec);

/// k samples drawn uniformly without replacement.
Dataset subset(const Dataset& data, std::size_t k, std::uint64_t seed);

/// Deterministic split into (first, second) with `second_size` samples in the second part.
std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t second_size, std::uint64_t seed);

}  // namespace devolve
