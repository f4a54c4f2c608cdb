#include "devolve/codec.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <queue>

#include "devolve/model_io.hpp"

namespace devolve {

// ---------------------------------------------------------------------------
// Bit I/O

void BitWriter::put(std::uint64_t bits, unsigned count) {
  for (unsigned i = count; i-- > 0;) {
    if (bits_ % 8 == 0) buf_.push_back(0);
    if ((bits >> i) & 1u) buf_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
    ++bits_;
  }
}

BitReader::BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_length)
    : bytes_(bytes), limit_(bit_length) {
  if ((bit_length + 7) / 8 > bytes.size()) throw FormatError("bit stream shorter than its declared length");
}

unsigned BitReader::bit() {
  if (pos_ >= limit_) throw FormatError("truncated bit stream at bit " + std::to_string(pos_));
  const unsigned b = (bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1u;
  ++pos_;
  return b;
}

std::uint64_t BitReader::get(unsigned count) {
  std::uint64_t v = 0;
  for (unsigned i = 0; i < count; ++i) v = (v << 1) | bit();
  return v;
}

// ---------------------------------------------------------------------------
// Huffman

HuffmanTable::HuffmanTable(std::vector<std::uint8_t> lengths) : lengths_(std::move(lengths)) {
  unsigned max_len = 0;
  double kraft = 0.0;
  for (std::uint8_t l : lengths_) {
    if (l > kMaxLength) throw FormatError("Huffman code length " + std::to_string(l) + " too long");
    if (l) kraft += std::ldexp(1.0, -static_cast<int>(l));
    max_len = std::max<unsigned>(max_len, l);
  }
  if (max_len == 0) throw FormatError("Huffman table has no symbols");
  if (kraft > 1.0) throw FormatError("Huffman lengths violate the Kraft inequality");

  count_.assign(max_len + 1, 0);
  for (std::uint8_t l : lengths_)
    if (l) ++count_[l];
  for (std::uint32_t s = 0; s < lengths_.size(); ++s)
    if (lengths_[s]) sorted_.push_back(s);
  std::stable_sort(sorted_.begin(), sorted_.end(), [&](std::uint32_t a, std::uint32_t b) { return lengths_[a] < lengths_[b]; });

  first_code_.assign(max_len + 1, 0);
  offset_.assign(max_len + 1, 0);
  std::uint64_t code = 0;
  std::uint32_t offset = 0;
  for (unsigned len = 1; len <= max_len; ++len) {
    code <<= 1;
    first_code_[len] = code;
    offset_[len] = offset;
    code += count_[len];
    offset += count_[len];
  }
  codes_.assign(lengths_.size(), 0);
  std::vector<std::uint64_t> next = first_code_;
  for (std::uint32_t s : sorted_) codes_[s] = next[lengths_[s]]++;
}

void HuffmanTable::encode(std::uint32_t symbol, BitWriter& out) const {
  if (symbol >= lengths_.size() || lengths_[symbol] == 0) {
    throw std::invalid_argument("symbol " + std::to_string(symbol) + " not in Huffman table");
  }
  out.put(codes_[symbol], lengths_[symbol]);
}

std::uint32_t HuffmanTable::decode(BitReader& in) const {
  std::uint64_t code = 0;
  for (unsigned len = 1; len < first_code_.size(); ++len) {
    code = (code << 1) | in.bit();
    if (code - first_code_[len] < count_[len] && code >= first_code_[len]) {
      return sorted_[offset_[len] + static_cast<std::uint32_t>(code - first_code_[len])];
    }
  }
  throw FormatError("invalid Huffman codeword");
}

double HuffmanTable::kraft_sum() const {
  double k = 0.0;
  for (std::uint8_t l : lengths_)
    if (l) k += std::ldexp(1.0, -static_cast<int>(l));
  return k;
}

HuffmanTable huffman_build(std::span<const std::uint64_t> frequencies) {
  std::vector<std::uint8_t> lengths(frequencies.size(), 0);
  struct Node {
    std::uint64_t weight;
    std::size_t id;
  };
  // Min-heap on (weight, id); ids make the construction deterministic.
  auto greater = [](const Node& a, const Node& b) { return a.weight != b.weight ? a.weight > b.weight : a.id > b.id; };
  std::priority_queue<Node, std::vector<Node>, decltype(greater)> heap(greater);
  std::vector<std::size_t> parent;
  std::vector<std::size_t> leaf_node(frequencies.size(), SIZE_MAX);
  for (std::size_t s = 0; s < frequencies.size(); ++s) {
    if (frequencies[s] == 0) continue;
    leaf_node[s] = parent.size();
    heap.push({frequencies[s], parent.size()});
    parent.push_back(SIZE_MAX);
  }
  if (heap.empty()) throw std::invalid_argument("huffman_build: no symbol has a nonzero count");
  if (heap.size() == 1) {
    lengths[static_cast<std::size_t>(std::find_if(frequencies.begin(), frequencies.end(),
                                                  [](std::uint64_t f) { return f > 0; }) -
                                     frequencies.begin())] = 1;
    return HuffmanTable(std::move(lengths));
  }
  while (heap.size() > 1) {
    const Node a = heap.top();
    heap.pop();
    const Node b = heap.top();
    heap.pop();
    const std::size_t id = parent.size();
    parent.push_back(SIZE_MAX);
    parent[a.id] = id;
    parent[b.id] = id;
    heap.push({a.weight + b.weight, id});
  }
  for (std::size_t s = 0; s < frequencies.size(); ++s) {
    if (leaf_node[s] == SIZE_MAX) continue;
    unsigned depth = 0;
    for (std::size_t n = leaf_node[s]; parent[n] != SIZE_MAX; n = parent[n]) ++depth;
    if (depth > HuffmanTable::kMaxLength) throw std::runtime_error("Huffman code too deep");
    lengths[s] = static_cast<std::uint8_t>(depth);
  }
  return HuffmanTable(std::move(lengths));
}

std::vector<std::uint64_t> symbol_counts(std::span<const std::uint32_t> codes, std::size_t alphabet) {
  std::vector<std::uint64_t> f(alphabet, 0);
  for (std::uint32_t c : codes) {
    if (c >= alphabet) throw std::out_of_range("code outside alphabet");
    ++f[c];
  }
  return f;
}

double entropy_bits(std::span<const std::uint64_t> frequencies) {
  const double total = static_cast<double>(std::accumulate(frequencies.begin(), frequencies.end(), std::uint64_t{0}));
  if (total == 0) return 0.0;
  double h = 0.0;
  for (std::uint64_t f : frequencies)
    if (f) {
      const double p = static_cast<double>(f) / total;
      h -= p * std::log2(p);
    }
  return h;
}

double average_code_length(const HuffmanTable& table, std::span<const std::uint64_t> frequencies) {
  double total = 0.0, bits = 0.0;
  for (std::size_t s = 0; s < frequencies.size(); ++s) {
    total += static_cast<double>(frequencies[s]);
    if (frequencies[s]) bits += static_cast<double>(frequencies[s]) * table.length(s);
  }
  return total > 0 ? bits / total : 0.0;
}

// ---------------------------------------------------------------------------
// Masks

std::vector<std::uint8_t> encode_mask_bitmap(const std::vector<bool>& mask) {
  std::vector<std::uint8_t> out((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  return out;
}

namespace {

void put_varint(std::vector<std::uint8_t>& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint64_t get_varint(std::span<const std::uint8_t> in, std::size_t& pos) {
  std::uint64_t v = 0;
  for (unsigned shift = 0; shift < 64; shift += 7) {
    if (pos >= in.size()) throw FormatError("truncated run-length mask at byte " + std::to_string(pos));
    const std::uint8_t b = in[pos++];
    v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
    if (!(b & 0x80)) return v;
  }
  throw FormatError("overlong varint in run-length mask");
}

}  // namespace

std::vector<std::uint8_t> encode_mask_runs(const std::vector<bool>& mask) {
  std::vector<std::uint8_t> out;
  bool pruned = true;
  std::size_t i = 0;
  while (i < mask.size()) {
    std::size_t run = 0;
    while (i < mask.size() && mask[i] == pruned) {
      ++run;
      ++i;
    }
    put_varint(out, run);
    pruned = !pruned;
  }
  return out;
}

std::vector<bool> decode_mask(MaskEncoding tag, std::span<const std::uint8_t> payload, std::size_t size) {
  std::vector<bool> mask(size, false);
  if (tag == MaskEncoding::Bitmap) {
    if (payload.size() != (size + 7) / 8) throw FormatError("bitmap mask has wrong length");
    for (std::size_t i = 0; i < size; ++i) mask[i] = (payload[i / 8] >> (7 - i % 8)) & 1u;
    return mask;
  }
  if (tag != MaskEncoding::RunLength) throw FormatError("unknown mask encoding");
  std::size_t pos = 0, at = 0;
  bool pruned = true;
  while (at < size) {
    const std::uint64_t run = get_varint(payload, pos);
    if (run > size - at) throw FormatError("run-length mask overflows layer size");
    if (pruned) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(at), run, true);
    at += run;
    pruned = !pruned;
  }
  if (pos != payload.size()) throw FormatError("trailing bytes in run-length mask");
  return mask;
}

EncodedMask encode_mask(const std::vector<bool>& mask) {
  auto bitmap = encode_mask_bitmap(mask);
  auto runs = encode_mask_runs(mask);
  if (runs.size() < bitmap.size()) return {MaskEncoding::RunLength, std::move(runs)};
  return {MaskEncoding::Bitmap, std::move(bitmap)};
}

// ---------------------------------------------------------------------------
// Layers

EncodedLayer encode_layer(const std::vector<bool>& mask, std::span<const std::uint32_t> codes,
                          const HuffmanTable& table) {
  const auto survivors = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), false));
  if (codes.size() != survivors) {
    throw std::invalid_argument("encode_layer: " + std::to_string(codes.size()) + " codes for " +
                                std::to_string(survivors) + " surviving weights");
  }
  EncodedLayer out{encode_mask(mask), table, {}, 0};
  BitWriter bw;
  for (std::uint32_t c : codes) table.encode(c, bw);
  out.payload = bw.bytes();
  out.payload_bits = bw.bit_length();
  return out;
}

DecodedLayer decode_layer(const EncodedLayer& layer, std::size_t size, std::span<const double> lut) {
  DecodedLayer out;
  out.mask = decode_mask(layer.mask.tag, layer.mask.payload, size);
  BitReader br(layer.payload, layer.payload_bits);
  out.weights.assign(size, 0.0);
  for (std::size_t i = 0; i < size; ++i) {
    if (out.mask[i]) continue;
    const std::uint32_t c = layer.table.decode(br);
    if (c >= lut.size()) throw FormatError("decoded code outside LUT");
    out.codes.push_back(c);
    out.weights[i] = lut[c];
  }
  if (br.remaining() != 0) throw FormatError("trailing bits in layer payload");
  return out;
}

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Container

namespace {

enum class PayloadEncoding : std::uint8_t { Lut = 0, RawF32 = 1, RawF64 = 2 };

struct RawEntry {
  std::size_t layer = 0;
  std::vector<Shape> shapes;
  PayloadEncoding encoding = PayloadEncoding::Lut;
  EncodedLayer encoded;
  QuantizationSpec spec;
  std::size_t size = 0;
};

struct RawContainer {
  Network arch;
  std::vector<RawEntry> entries;
};

void write_shape(ByteWriter& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) w.u32(static_cast<std::uint32_t>(d));
}

Shape read_shape(ByteReader& r) {
  const std::uint8_t rank = r.u8();
  if (rank == 0 || rank > 8) throw FormatError("invalid rank at byte " + std::to_string(r.offset() - 1));
  Shape s(rank);
  for (auto& d : s) d = r.u32();
  return s;
}

RawContainer parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 2 + 4 + 4) throw FormatError("packed file too short");
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.subspan(body));
  const std::uint32_t stored = tail.u32();
  if (crc32_ieee(bytes.first(body)) != stored) throw FormatError("CRC mismatch: packed file is corrupted");

  ByteReader in(bytes.first(body));
  in.expect_tag("DEVP");
  const std::uint16_t version = in.u16();
  if (version != kPackedFormatVersion) throw FormatError("unsupported packed version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  const std::uint32_t arch_len = in.u32();
  auto arch_bytes = in.bytes(arch_len);
  ByteReader arch_in(arch_bytes);
  RawContainer c{read_architecture(arch_in), {}};
  if (arch_in.remaining() != 0) throw FormatError("trailing bytes in architecture block");

  for (std::uint32_t e = 0; e < count; ++e) {
    RawEntry entry;
    entry.layer = in.u32();
    const std::uint8_t tensors = in.u8();
    for (std::uint8_t t = 0; t < tensors; ++t) entry.shapes.push_back(read_shape(in));
    entry.size = 0;
    for (const auto& s : entry.shapes) entry.size += shape_size(s);
    const std::uint8_t enc = in.u8();
    if (enc > 2) throw FormatError("unknown payload encoding at byte " + std::to_string(in.offset() - 1));
    entry.encoding = static_cast<PayloadEncoding>(enc);
    const std::uint8_t tag = in.u8();
    if (tag > 1) throw FormatError("unknown mask encoding at byte " + std::to_string(in.offset() - 1));
    entry.encoded.mask.tag = static_cast<MaskEncoding>(tag);
    const std::uint32_t mask_len = in.u32();
    auto mb = in.bytes(mask_len);
    entry.encoded.mask.payload.assign(mb.begin(), mb.end());
    if (entry.encoding == PayloadEncoding::Lut) {
      const std::uint8_t scheme = in.u8();
      const std::uint8_t rounding = in.u8();
      const std::uint8_t bits = in.u8();
      if (scheme > 2 || rounding > 1 || bits > 16) throw FormatError("invalid LUT header at byte " + std::to_string(in.offset() - 3));
      entry.spec.scheme = static_cast<QuantScheme>(scheme);
      entry.spec.rounding = static_cast<Rounding>(rounding);
      entry.spec.bits = bits;
      const std::size_t n = std::size_t{1} << bits;
      entry.spec.levels.resize(n);
      for (double& v : entry.spec.levels) v = in.f32();
      std::vector<std::uint8_t> lengths(n);
      for (auto& l : lengths) l = in.u8();
      const bool any = std::any_of(lengths.begin(), lengths.end(), [](std::uint8_t l) { return l != 0; });
      if (any) entry.encoded.table = HuffmanTable(std::move(lengths));
    } else {
      entry.spec.scheme = QuantScheme::Identity;
      entry.spec.bits = entry.encoding == PayloadEncoding::RawF64 ? 64 : 32;
      entry.spec.rounding = static_cast<Rounding>(in.u8());
      if (entry.spec.rounding != Rounding::Nearest && entry.spec.rounding != Rounding::Stochastic) {
        throw FormatError("invalid rounding byte at " + std::to_string(in.offset() - 1));
      }
    }
    entry.encoded.payload_bits = in.u64();
    auto pb = in.bytes(static_cast<std::size_t>((entry.encoded.payload_bits + 7) / 8));
    entry.encoded.payload.assign(pb.begin(), pb.end());
    c.entries.push_back(std::move(entry));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes before CRC at byte " + std::to_string(in.offset()));
  return c;
}

}  // namespace

std::vector<std::uint8_t> pack(const QuantizedModel& model) {
  ByteWriter w;
  w.tag("DEVP");
  w.u16(kPackedFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  ByteWriter arch;
  write_architecture(arch, model.network);
  w.u32(static_cast<std::uint32_t>(arch.size()));
  w.bytes(arch.data());

  for (const QuantizedLayer& q : model.layers) {
    w.u32(static_cast<std::uint32_t>(q.layer));
    w.u8(static_cast<std::uint8_t>(q.shapes.size()));
    for (const auto& s : q.shapes) write_shape(w, s);
    const bool raw = q.spec.scheme == QuantScheme::Identity;
    const bool wide = raw && q.spec.bits == 64;
    w.u8(static_cast<std::uint8_t>(!raw ? PayloadEncoding::Lut : wide ? PayloadEncoding::RawF64 : PayloadEncoding::RawF32));
    if (raw) {
      const EncodedMask m = encode_mask(q.mask);
      w.u8(static_cast<std::uint8_t>(m.tag));
      w.u32(static_cast<std::uint32_t>(m.payload.size()));
      w.bytes(m.payload);
      w.u8(static_cast<std::uint8_t>(q.spec.rounding));
      if (q.raw.size() != static_cast<std::size_t>(std::count(q.mask.begin(), q.mask.end(), false))) {
        throw std::invalid_argument("raw layer value count does not match its mask");
      }
      BitWriter bw;
      for (double v : q.raw) {
        if (wide) {
          bw.put(std::bit_cast<std::uint64_t>(v), 64);
        } else {
          if (static_cast<double>(static_cast<float>(v)) != v) throw std::invalid_argument("raw value not representable as f32");
          bw.put(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 32);
        }
      }
      w.u64(bw.bit_length());
      w.bytes(bw.bytes());
      continue;
    }
    q.spec.validate();
    HuffmanTable table;
    const auto freqs = symbol_counts(q.codes, q.spec.levels.size());
    EncodedLayer enc;
    if (!q.codes.empty()) {
      table = huffman_build(freqs);
      enc = encode_layer(q.mask, q.codes, table);
    } else {
      enc = encode_layer(q.mask, q.codes, table);
    }
    w.u8(static_cast<std::uint8_t>(enc.mask.tag));
    w.u32(static_cast<std::uint32_t>(enc.mask.payload.size()));
    w.bytes(enc.mask.payload);
    w.u8(static_cast<std::uint8_t>(q.spec.scheme));
    w.u8(static_cast<std::uint8_t>(q.spec.rounding));
    w.u8(static_cast<std::uint8_t>(q.spec.bits));
    for (double v : q.spec.levels) {
      if (static_cast<double>(static_cast<float>(v)) != v) throw std::invalid_argument("LUT level not representable as f32");
      w.f32(static_cast<float>(v));
    }
    for (std::size_t s = 0; s < q.spec.levels.size(); ++s) w.u8(q.codes.empty() ? 0 : table.length(s));
    w.u64(enc.payload_bits);
    w.bytes(enc.payload);
  }
  const std::uint32_t crc = crc32_ieee(w.data());
  w.u32(crc);
  return w.take();
}

QuantizedModel unpack(std::span<const std::uint8_t> bytes) {
  RawContainer c = parse_container(bytes);
  QuantizedModel model{std::move(c.arch), {}};
  for (RawEntry& e : c.entries) {
    if (e.layer >= model.network.layer_count()) throw FormatError("packed layer index out of range");
    Layer& layer = model.network.layers()[e.layer];
    if (layer.params.size() != e.shapes.size()) throw FormatError("packed layer tensor count mismatch");
    for (std::size_t t = 0; t < e.shapes.size(); ++t)
      if (layer.params[t].shape() != e.shapes[t]) throw FormatError("packed layer shape mismatch at " + layer.name(e.layer));

    QuantizedLayer q;
    q.layer = e.layer;
    q.shapes = e.shapes;
    q.spec = e.spec;
    q.mask = decode_mask(e.encoded.mask.tag, e.encoded.mask.payload, e.size);
    if (e.encoding != PayloadEncoding::Lut) {
      BitReader br(e.encoded.payload, e.encoded.payload_bits);
      const auto survivors = static_cast<std::size_t>(std::count(q.mask.begin(), q.mask.end(), false));
      for (std::size_t i = 0; i < survivors; ++i) {
        if (e.encoding == PayloadEncoding::RawF64) q.raw.push_back(std::bit_cast<double>(br.get(64)));
        else q.raw.push_back(std::bit_cast<float>(static_cast<std::uint32_t>(br.get(32))));
      }
      if (br.remaining() != 0) throw FormatError("trailing bits in raw payload");
    } else {
      DecodedLayer d;
      if (e.encoded.table.symbol_count() == 0) {
        if (std::count(q.mask.begin(), q.mask.end(), false) != 0 || e.encoded.payload_bits != 0) {
          throw FormatError("layer with survivors has no Huffman table");
        }
      } else {
        d = decode_layer(e.encoded, e.size, q.spec.levels);
      }
      q.codes = std::move(d.codes);
    }
    restore_layer(layer, q);
    model.layers.push_back(std::move(q));
  }
  return model;
}

CompressionReport compression_report(const Network& original, std::span<const std::uint8_t> packed) {
  const RawContainer c = parse_container(packed);
  CompressionReport r;
  r.parameters = original.parameter_count();
  r.total_bits = static_cast<std::uint64_t>(packed.size()) * 8;
  for (const RawEntry& e : c.entries) {
    LayerPackStats s;
    s.layer = e.layer;
    s.parameters = e.size;
    const auto mask = decode_mask(e.encoded.mask.tag, e.encoded.mask.payload, e.size);
    s.survivors = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), false));
    s.mask_tag = e.encoded.mask.tag;
    s.mask_bytes = e.encoded.mask.payload.size();
    s.payload_bits = e.encoded.payload_bits;
    if (e.encoding == PayloadEncoding::Lut && s.survivors > 0) {
      const auto d = decode_layer(e.encoded, e.size, e.spec.levels);
      const auto freqs = symbol_counts(d.codes, e.spec.levels.size());
      s.average_code_length = average_code_length(e.encoded.table, freqs);
      s.entropy = entropy_bits(freqs);
    } else if (s.survivors > 0) {
      s.average_code_length = e.spec.bits;
      s.entropy = e.spec.bits;
    }
    r.payload_bits += s.payload_bits;
    r.layers.push_back(s);
  }
  const double dense = 32.0 * static_cast<double>(r.parameters);
  r.payload_ratio = r.payload_bits ? dense / static_cast<double>(r.payload_bits) : INFINITY;
  r.total_ratio = dense / static_cast<double>(r.total_bits);
  return r;
}

}  // namespace devolve
