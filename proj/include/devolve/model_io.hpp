#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "devolve/bytes.hpp"
#include "devolve/network.hpp"
#include "devolve/sparsity.hpp"

namespace devolve {

inline constexpr std::uint16_t kModelFormatVersion = 1;

// "DEVN" | version u16 | input rank u8, dims u32... | layer count u32 |
// per layer: kind u8, hyperparameters, tensor count u8, per tensor
// (rank u8, dims u32..., raw f64 data). All little-endian.
std::vector<std::uint8_t> serialize_network(const Network& net);
Network deserialize_network(std::span<const std::uint8_t> bytes);

/// Architecture-only encoding (no parameter data); shared with the packed format.
void write_architecture(ByteWriter& out, const Network& net);
Network read_architecture(ByteReader& in);

void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

/// Builds and initializes a network from a JSON description:
///   {"input_shape": [784], "layers": [{"type": "dense", "units": 32}, {"type": "relu"}, ...]}
/// Layer types: dense(units), conv2d(kernel, filters, stride, padding), relu,
/// leaky_relu(slope), flatten, maxpool2d(pool, stride), softmax.
Network network_from_json(const nlohmann::json& arch, std::uint64_t seed);

nlohmann::json network_to_json(const Network& net);

// "DEVM" | version u16 | layer count u32 | per layer: tensor count u8, per
// tensor (size u32, bitmap MSB-first, 1 = pruned).
std::vector<std::uint8_t> serialize_mask(const SparsityMask& mask);
SparsityMask deserialize_mask(std::span<const std::uint8_t> bytes, const Network& net);

void save_mask(const SparsityMask& mask, const std::string& path);
SparsityMask load_mask(const std::string& path, const Network& net);

}  // namespace devolve
