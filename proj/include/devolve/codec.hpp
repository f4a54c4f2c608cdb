#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "devolve/bytes.hpp"
#include "devolve/network.hpp"
#include "devolve/quantizer.hpp"

namespace devolve {

/// MSB-first bit packer.
class BitWriter {
 public:
  void put(std::uint64_t bits, unsigned count);
  std::uint64_t bit_length() const { return bits_; }
  /// Bytes with the final partial byte zero-padded.
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::uint64_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_length);
  unsigned bit();
  std::uint64_t get(unsigned count);
  std::uint64_t remaining() const { return limit_ - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t limit_;
  std::uint64_t pos_ = 0;
};

/// Canonical prefix code over symbols 0..n-1 described by per-symbol code
/// lengths (0 = symbol absent). Codewords are assigned in (length, symbol)
/// order.
class HuffmanTable {
 public:
  static constexpr unsigned kMaxLength = 57;

  HuffmanTable() = default;
  /// Validates the lengths (Kraft sum <= 1) and assigns canonical codewords.
  explicit HuffmanTable(std::vector<std::uint8_t> lengths);

  std::size_t symbol_count() const { return lengths_.size(); }
  const std::vector<std::uint8_t>& lengths() const { return lengths_; }
  std::uint8_t length(std::size_t symbol) const { return lengths_.at(symbol); }
  std::uint64_t code(std::size_t symbol) const { return codes_.at(symbol); }

  void encode(std::uint32_t symbol, BitWriter& out) const;
  std::uint32_t decode(BitReader& in) const;

  /// Sum over symbols of 2^-length.
  double kraft_sum() const;

  friend bool operator==(const HuffmanTable& a, const HuffmanTable& b) { return a.lengths_ == b.lengths_; }

 private:
  std::vector<std::uint8_t> lengths_;
  std::vector<std::uint64_t> codes_;
  // Canonical decoding: per length, first code value, count, and offset into sorted_.
  std::vector<std::uint64_t> first_code_;
  std::vector<std::uint32_t> count_;
  std::vector<std::uint32_t> offset_;
  std::vector<std::uint32_t> sorted_;
};

/// Optimal prefix code for the given symbol counts. A lone symbol gets a 1-bit code.
HuffmanTable huffman_build(std::span<const std::uint64_t> frequencies);

std::vector<std::uint64_t> symbol_counts(std::span<const std::uint32_t> codes, std::size_t alphabet);
double entropy_bits(std::span<const std::uint64_t> frequencies);
double average_code_length(const HuffmanTable& table, std::span<const std::uint64_t> frequencies);

enum class MaskEncoding : std::uint8_t { Bitmap = 0, RunLength = 1 };

/// 1 bit per position, MSB first, set = pruned.
std::vector<std::uint8_t> encode_mask_bitmap(const std::vector<bool>& mask);
/// LEB128 run lengths alternating pruned/kept, starting with a pruned run.
std::vector<std::uint8_t> encode_mask_runs(const std::vector<bool>& mask);
std::vector<bool> decode_mask(MaskEncoding tag, std::span<const std::uint8_t> payload, std::size_t size);

struct EncodedMask {
  MaskEncoding tag;
  std::vector<std::uint8_t> payload;
};
/// The strictly smaller of the two encodings, bitmap on a tie.
EncodedMask encode_mask(const std::vector<bool>& mask);

/// One layer's mask plus Huffman-coded code stream.
struct EncodedLayer {
  EncodedMask mask;
  HuffmanTable table;
  std::vector<std::uint8_t> payload;
  std::uint64_t payload_bits = 0;
};

EncodedLayer encode_layer(const std::vector<bool>& mask, std::span<const std::uint32_t> codes,
                          const HuffmanTable& table);

struct DecodedLayer {
  std::vector<bool> mask;
  std::vector<std::uint32_t> codes;
  std::vector<double> weights;  // dequantized, zeros at masked positions
};

DecodedLayer decode_layer(const EncodedLayer& layer, std::size_t size, std::span<const double> lut);

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes);

inline constexpr std::uint16_t kPackedFormatVersion = 1;

// "DEVP" | version u16 | layer count u32 | architecture length u32 + bytes |
// per layer: index u32, tensor count u8 + shapes, encoding u8 (0 lut, 1 raw f32,
// 2 raw f64), mask tag u8, mask length u32 + bytes, [lut: scheme u8, rounding u8,
// bits u8, 2^bits f32 levels, 2^bits u8 code lengths | raw: rounding u8],
// payload bits u64 + bytes |
// CRC32 of everything before it.
std::vector<std::uint8_t> pack(const QuantizedModel& model);
QuantizedModel unpack(std::span<const std::uint8_t> bytes);

struct LayerPackStats {
  std::size_t layer = 0;
  std::size_t parameters = 0;
  std::size_t survivors = 0;
  MaskEncoding mask_tag = MaskEncoding::Bitmap;
  std::size_t mask_bytes = 0;
  std::uint64_t payload_bits = 0;
  double average_code_length = 0.0;
  double entropy = 0.0;
};

struct CompressionReport {
  std::size_t parameters = 0;      // N
  std::uint64_t payload_bits = 0;  // code payload only
  std::uint64_t total_bits = 0;    // whole packed file
  double payload_ratio = 0.0;      // 32 N / payload_bits
  double total_ratio = 0.0;        // 32 N / total_bits
  std::vector<LayerPackStats> layers;
};

/// Ratios against a dense 32-bit baseline of `original`'s parameters,
/// measured on the packed bytes.
CompressionReport compression_report(const Network& original, std::span<const std::uint8_t> packed);

}  // namespace devolve
