#include "devolve/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "devolve/bytes.hpp"
#include "devolve/random.hpp"

namespace devolve {

Tensor Dataset::label_tensor() const {
  std::vector<double> v(labels.begin(), labels.end());
  return Tensor({labels.size()}, std::move(v));
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 4 > b.size()) throw FormatError("truncated IDX header at byte " + std::to_string(at));
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

Tensor parse_idx(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if ((magic >> 16) != 0) throw FormatError("bad IDX magic at byte 0: high bytes must be zero");
  if (((magic >> 8) & 0xff) != 0x08) throw FormatError("unsupported IDX element type at byte 2 (only unsigned byte)");
  const std::size_t rank = magic & 0xff;
  if (rank == 0) throw FormatError("IDX rank 0 at byte 3");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = read_be32(bytes, 4 + 4 * i);
    if (shape[i] == 0) throw FormatError("zero IDX dimension at byte " + std::to_string(4 + 4 * i));
  }
  const std::size_t header = 4 + 4 * rank;
  const std::size_t count = shape_size(shape);
  if (bytes.size() - header < count) {
    throw FormatError("truncated IDX payload at byte " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(header + count) + " bytes");
  }
  if (bytes.size() - header > count) throw FormatError("trailing bytes after IDX payload at byte " + std::to_string(header + count));
  std::vector<double> data(count);
  const double scale = rank == 1 ? 1.0 : 255.0;
  for (std::size_t i = 0; i < count; ++i) data[i] = bytes[header + i] / scale;
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> serialize_idx(const Tensor& t) {
  if (t.rank() == 0 || t.rank() > 255) throw std::invalid_argument("IDX needs rank 1..255");
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000800u | static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_be32(out, static_cast<std::uint32_t>(d));
  const double scale = t.rank() == 1 ? 1.0 : 255.0;
  for (double v : t.data()) {
    const double b = std::round(v * scale);
    if (!(b >= 0.0 && b <= 255.0)) throw std::invalid_argument("value out of IDX byte range");
    out.push_back(static_cast<std::uint8_t>(b));
  }
  return out;
}

Tensor load_idx_file(const std::string& path) {
  // gzread transparently passes through uncompressed files.
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) bytes.insert(bytes.end(), buf, buf + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("read error in " + path);
  return parse_idx(bytes);
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  Tensor images = load_idx_file(images_path);
  Tensor labels = load_idx_file(labels_path);
  if (labels.rank() != 1 || labels.dim(0) != images.dim(0)) {
    throw FormatError("label file " + labels_path + " does not match image count");
  }
  Dataset d;
  const std::size_t n = images.dim(0);
  d.inputs = images.reshaped({n, images.row_size()});
  d.labels.reserve(n);
  for (double v : labels.data()) d.labels.push_back(static_cast<std::size_t>(v));
  d.provenance = images_path;
  return d;
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.n < spec.classes) throw std::invalid_argument("synthetic dataset needs n >= classes >= 1");
  if (spec.dim == 0 || (spec.kind == SyntheticKind::Rings && spec.dim < 2)) {
    throw std::invalid_argument("synthetic dataset dimension too small");
  }
  // Balanced labels, then a seeded shuffle of sample order.
  std::vector<std::size_t> labels(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) labels[i] = i % spec.classes;
  Rng order(stream_seed(spec.seed, {0x5eed, 1}));
  for (std::size_t i = spec.n; i-- > 1;) std::swap(labels[i], labels[order.below(i + 1)]);

  std::vector<double> x(spec.n * spec.dim, 0.0);
  Rng rng(stream_seed(spec.seed, {0x5eed, 2}));
  if (spec.kind == SyntheticKind::Blobs) {
    std::vector<double> centers(spec.classes * spec.dim);
    Rng crng(stream_seed(spec.seed, {0x5eed, 3}));
    for (double& c : centers) c = crng.normal();
    for (std::size_t i = 0; i < spec.n; ++i) {
      const double* c = centers.data() + labels[i] * spec.dim;
      for (std::size_t j = 0; j < spec.dim; ++j) x[i * spec.dim + j] = c[j] + spec.noise * rng.normal();
    }
  } else {
    for (std::size_t i = 0; i < spec.n; ++i) {
      const double r = static_cast<double>(labels[i] + 1) + spec.noise * rng.normal();
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      x[i * spec.dim] = r * std::cos(theta);
      x[i * spec.dim + 1] = r * std::sin(theta);
    }
  }
  Dataset d;
  d.inputs = Tensor({spec.n, spec.dim}, std::move(x));
  d.labels = std::move(labels);
  d.provenance = std::string(spec.kind == SyntheticKind::Blobs ? "blobs" : "rings") + ":seed=" + std::to_string(spec.seed);
  return d;
}

namespace {

std::vector<std::size_t> permutation_prefix(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(stream_seed(seed, {0x5b5e7}));
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

Dataset take(const Dataset& data, std::span<const std::size_t> rows, const std::string& tag) {
  Dataset out;
  out.inputs = gather_rows(data.inputs, rows);
  if (data.has_labels())
    for (std::size_t r : rows) out.labels.push_back(data.labels[r]);
  out.provenance = data.provenance + tag;
  return out;
}

}  // namespace

Dataset subset(const Dataset& data, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("subset size must be positive");
  if (k > data.size()) {
    throw std::invalid_argument("subset size " + std::to_string(k) + " exceeds dataset size " + std::to_string(data.size()));
  }
  const auto rows = permutation_prefix(data.size(), k, seed);
  return take(data, rows, "|subset(" + std::to_string(k) + ",seed=" + std::to_string(seed) + ")");
}

std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t second_size, std::uint64_t seed) {
  if (second_size == 0 || second_size >= data.size()) throw std::invalid_argument("split size out of range");
  auto rows = permutation_prefix(data.size(), data.size(), seed);
  std::span<const std::size_t> all(rows);
  return {take(data, all.subspan(second_size), "|split-a"), take(data, all.first(second_size), "|split-b")};
}

}  // namespace devolve
