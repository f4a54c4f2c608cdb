#include "devolve/model_io.hpp"

#include <fstream>
#include <iterator>
#include <set>

namespace devolve {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

namespace {

void write_shape(ByteWriter& out, const Shape& s) {
  out.u8(static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) out.u32(static_cast<std::uint32_t>(d));
}

Shape read_shape(ByteReader& in) {
  const std::uint8_t rank = in.u8();
  if (rank == 0 || rank > 8) throw FormatError("invalid rank " + std::to_string(rank) + " at byte " + std::to_string(in.offset() - 1));
  Shape s(rank);
  for (auto& d : s) {
    d = in.u32();
    if (d == 0) throw FormatError("zero dimension at byte " + std::to_string(in.offset() - 4));
  }
  return s;
}

void write_layer_head(ByteWriter& out, const Layer& l) {
  out.u8(static_cast<std::uint8_t>(l.kind));
  switch (l.kind) {
    case LayerKind::Dense:
      out.u32(static_cast<std::uint32_t>(l.units));
      break;
    case LayerKind::Conv2D:
      out.u32(static_cast<std::uint32_t>(l.kernel_h));
      out.u32(static_cast<std::uint32_t>(l.kernel_w));
      out.u32(static_cast<std::uint32_t>(l.filters));
      out.u32(static_cast<std::uint32_t>(l.stride));
      out.u8(static_cast<std::uint8_t>(l.padding));
      break;
    case LayerKind::LeakyReLU:
      out.f64(l.slope);
      break;
    case LayerKind::MaxPool2D:
      out.u32(static_cast<std::uint32_t>(l.pool));
      out.u32(static_cast<std::uint32_t>(l.stride));
      break;
    default:
      break;
  }
}

Layer read_layer_head(ByteReader& in) {
  Layer l;
  const std::size_t at = in.offset();
  const std::uint8_t kind = in.u8();
  if (kind < 1 || kind > 7) throw FormatError("unknown layer kind " + std::to_string(kind) + " at byte " + std::to_string(at));
  l.kind = static_cast<LayerKind>(kind);
  switch (l.kind) {
    case LayerKind::Dense:
      l.units = in.u32();
      break;
    case LayerKind::Conv2D: {
      l.kernel_h = in.u32();
      l.kernel_w = in.u32();
      l.filters = in.u32();
      l.stride = in.u32();
      const std::uint8_t pad = in.u8();
      if (pad > 1) throw FormatError("unknown padding " + std::to_string(pad) + " at byte " + std::to_string(in.offset() - 1));
      l.padding = static_cast<Padding>(pad);
      break;
    }
    case LayerKind::LeakyReLU:
      l.slope = in.f64();
      break;
    case LayerKind::MaxPool2D:
      l.pool = in.u32();
      l.stride = in.u32();
      break;
    default:
      break;
  }
  return l;
}

void write_body(ByteWriter& out, const Network& net, bool with_params) {
  write_shape(out, net.input_shape());
  out.u32(static_cast<std::uint32_t>(net.layer_count()));
  for (const Layer& l : net.layers()) {
    write_layer_head(out, l);
    if (!with_params) continue;
    out.u8(static_cast<std::uint8_t>(l.params.size()));
    for (const Tensor& t : l.params) {
      write_shape(out, t.shape());
      for (double v : t.data()) out.f64(v);
    }
  }
}

Network read_body(ByteReader& in, bool with_params) {
  Network net(read_shape(in));
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Layer l = read_layer_head(in);
    if (with_params) {
      const std::uint8_t tensors = in.u8();
      for (std::uint8_t t = 0; t < tensors; ++t) {
        Shape s = read_shape(in);
        std::vector<double> data(shape_size(s));
        if (data.size() * 8 > in.remaining()) {
          throw FormatError("truncated tensor data at byte " + std::to_string(in.offset()));
        }
        for (double& v : data) v = in.f64();
        l.params.emplace_back(std::move(s), std::move(data));
      }
    }
    try {
      net.add_layer(std::move(l));
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("inconsistent model: ") + e.what());
    }
  }
  return net;
}

}  // namespace

void write_architecture(ByteWriter& out, const Network& net) { write_body(out, net, false); }

Network read_architecture(ByteReader& in) { return read_body(in, false); }

std::vector<std::uint8_t> serialize_network(const Network& net) {
  ByteWriter out;
  out.tag("DEVN");
  out.u16(kModelFormatVersion);
  write_body(out, net, true);
  return out.take();
}

Network deserialize_network(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_tag("DEVN");
  const std::uint16_t version = in.u16();
  if (version != kModelFormatVersion) throw FormatError("unsupported model version " + std::to_string(version));
  Network net = read_body(in, true);
  if (in.remaining() != 0) throw FormatError("trailing bytes after model at byte " + std::to_string(in.offset()));
  return net;
}

void save_network(const Network& net, const std::string& path) { write_file(path, serialize_network(net)); }

Network load_network(const std::string& path) { return deserialize_network(read_file(path)); }

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw std::invalid_argument("unknown key \"" + it.key() + "\" in " + where);
  }
}

std::pair<std::size_t, std::size_t> kernel_dims(const json& k) {
  if (k.is_array()) return {k.at(0).get<std::size_t>(), k.at(1).get<std::size_t>()};
  const auto s = k.get<std::size_t>();
  return {s, s};
}

}  // namespace

Network network_from_json(const json& arch, std::uint64_t seed) {
  if (!arch.is_object()) throw std::invalid_argument("architecture must be a JSON object");
  reject_unknown(arch, {"input_shape", "layers"}, "architecture");
  Network net(arch.at("input_shape").get<Shape>());
  std::size_t index = 0;
  for (const json& lj : arch.at("layers")) {
    const std::string where = "layer " + std::to_string(index++);
    const auto type = lj.at("type").get<std::string>();
    if (type == "dense") {
      reject_unknown(lj, {"type", "units"}, where);
      net.add_dense(lj.at("units").get<std::size_t>());
    } else if (type == "conv2d") {
      reject_unknown(lj, {"type", "kernel", "filters", "stride", "padding"}, where);
      const auto [kh, kw] = kernel_dims(lj.at("kernel"));
      const auto pad = lj.value("padding", std::string("valid"));
      if (pad != "valid" && pad != "same") throw std::invalid_argument(where + ": padding must be valid or same");
      net.add_conv2d(kh, kw, lj.at("filters").get<std::size_t>(), lj.value("stride", std::size_t{1}),
                     pad == "same" ? Padding::Same : Padding::Valid);
    } else if (type == "relu") {
      reject_unknown(lj, {"type"}, where);
      net.add_relu();
    } else if (type == "leaky_relu") {
      reject_unknown(lj, {"type", "slope"}, where);
      net.add_leaky_relu(lj.value("slope", 0.1));
    } else if (type == "flatten") {
      reject_unknown(lj, {"type"}, where);
      net.add_flatten();
    } else if (type == "maxpool2d") {
      reject_unknown(lj, {"type", "pool", "stride"}, where);
      const auto pool = lj.value("pool", std::size_t{2});
      net.add_maxpool2d(pool, lj.value("stride", pool));
    } else if (type == "softmax") {
      reject_unknown(lj, {"type"}, where);
      net.add_softmax();
    } else {
      throw std::invalid_argument(where + ": unknown layer type \"" + type + "\"");
    }
  }
  net.initialize(seed);
  return net;
}

json network_to_json(const Network& net) {
  json layers = json::array();
  for (const Layer& l : net.layers()) {
    json j{{"type", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::Dense: j["units"] = l.units; break;
      case LayerKind::Conv2D:
        j["kernel"] = {l.kernel_h, l.kernel_w};
        j["filters"] = l.filters;
        j["stride"] = l.stride;
        j["padding"] = l.padding == Padding::Same ? "same" : "valid";
        break;
      case LayerKind::LeakyReLU: j["slope"] = l.slope; break;
      case LayerKind::MaxPool2D:
        j["pool"] = l.pool;
        j["stride"] = l.stride;
        break;
      default: break;
    }
    layers.push_back(std::move(j));
  }
  return json{{"input_shape", net.input_shape()}, {"layers", std::move(layers)}};
}

std::vector<std::uint8_t> serialize_mask(const SparsityMask& mask) {
  ByteWriter w;
  w.tag("DEVM");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(mask.layer_count()));
  for (std::size_t l = 0; l < mask.layer_count(); ++l) {
    w.u8(static_cast<std::uint8_t>(mask.tensor_count(l)));
    for (std::size_t t = 0; t < mask.tensor_count(l); ++t) {
      const auto& bits = mask.bits(l, t);
      w.u32(static_cast<std::uint32_t>(bits.size()));
      std::vector<std::uint8_t> packed((bits.size() + 7) / 8, 0);
      for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
      w.bytes(packed);
    }
  }
  return w.take();
}

SparsityMask deserialize_mask(std::span<const std::uint8_t> bytes, const Network& net) {
  ByteReader in(bytes);
  in.expect_tag("DEVM");
  const std::uint16_t version = in.u16();
  if (version != 1) throw FormatError("unsupported mask version " + std::to_string(version));
  SparsityMask mask(net);
  const std::uint32_t layers = in.u32();
  if (layers != mask.layer_count()) throw FormatError("mask has " + std::to_string(layers) + " layers, network has " + std::to_string(mask.layer_count()));
  for (std::size_t l = 0; l < layers; ++l) {
    const std::uint8_t tensors = in.u8();
    if (tensors != mask.tensor_count(l)) throw FormatError("mask tensor count mismatch at " + net.layers()[l].name(l));
    std::size_t base = 0;
    for (std::size_t t = 0; t < tensors; ++t) {
      const std::size_t size = in.u32();
      if (size != mask.bits(l, t).size()) throw FormatError("mask size mismatch at " + net.layers()[l].name(l));
      auto packed = in.bytes((size + 7) / 8);
      for (std::size_t i = 0; i < size; ++i)
        if ((packed[i / 8] >> (7 - i % 8)) & 1u) mask.zero(l, base + i);
      base += size;
    }
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes in mask file at byte " + std::to_string(in.offset()));
  return mask;
}

void save_mask(const SparsityMask& mask, const std::string& path) { write_file(path, serialize_mask(mask)); }

SparsityMask load_mask(const std::string& path, const Network& net) { return deserialize_mask(read_file(path), net); }

}  // namespace devolve
