#include "devolve/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "devolve/random.hpp"
#include "devolve/sparsity.hpp"

namespace devolve {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::LeakyReLU: return "leaky_relu";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::MaxPool2D: return "maxpool2d";
    case LayerKind::Softmax: return "softmax";
  }
  return "unknown";
}

std::size_t Layer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

std::string Layer::name(std::size_t index) const { return to_string(kind) + "#" + std::to_string(index); }

namespace {

struct ConvGeometry {
  std::size_t in_h, in_w, in_c, out_h, out_w, out_c, kh, kw, stride, pad_top, pad_left;
};

ConvGeometry conv_geometry(const Layer& l) {
  ConvGeometry g{};
  g.in_h = l.input_shape[0];
  g.in_w = l.input_shape[1];
  g.in_c = l.input_shape[2];
  g.kh = l.kernel_h;
  g.kw = l.kernel_w;
  g.out_c = l.filters;
  g.stride = l.stride;
  if (l.padding == Padding::Same) {
    g.out_h = (g.in_h + g.stride - 1) / g.stride;
    g.out_w = (g.in_w + g.stride - 1) / g.stride;
    const std::size_t need_h = (g.out_h - 1) * g.stride + g.kh;
    const std::size_t need_w = (g.out_w - 1) * g.stride + g.kw;
    g.pad_top = need_h > g.in_h ? (need_h - g.in_h) / 2 : 0;
    g.pad_left = need_w > g.in_w ? (need_w - g.in_w) / 2 : 0;
  } else {
    g.out_h = (g.in_h - g.kh) / g.stride + 1;
    g.out_w = (g.in_w - g.kw) / g.stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

[[noreturn]] void layer_error(const Layer& l, std::size_t index, const std::string& what) {
  throw std::invalid_argument("layer " + l.name(index) + ": " + what);
}

// Fills output_shape and checks hyperparameters/parameters against input_shape.
void infer_layer(Layer& l, std::size_t index) {
  const Shape& in = l.input_shape;
  switch (l.kind) {
    case LayerKind::Dense: {
      if (in.size() != 1) layer_error(l, index, "expects rank-1 input, got " + shape_to_string(in));
      if (l.units == 0) layer_error(l, index, "units must be positive");
      l.output_shape = {l.units};
      if (l.params.empty()) l.params = {Tensor({in[0], l.units}), Tensor({l.units})};
      if (l.params.size() != 2 || l.params[0].shape() != Shape{in[0], l.units} ||
          l.params[1].shape() != Shape{l.units}) {
        layer_error(l, index, "parameter shapes do not match [" + std::to_string(in[0]) + "," +
                                  std::to_string(l.units) + "]");
      }
      break;
    }
    case LayerKind::Conv2D: {
      if (in.size() != 3) layer_error(l, index, "expects [h,w,c] input, got " + shape_to_string(in));
      if (l.kernel_h == 0 || l.kernel_w == 0 || l.filters == 0 || l.stride == 0) {
        layer_error(l, index, "kernel, filters and stride must be positive");
      }
      if (l.padding == Padding::Valid && (in[0] < l.kernel_h || in[1] < l.kernel_w)) {
        layer_error(l, index, "kernel larger than input " + shape_to_string(in));
      }
      const auto g = conv_geometry(l);
      l.output_shape = {g.out_h, g.out_w, g.out_c};
      const Shape kshape{l.kernel_h, l.kernel_w, in[2], l.filters};
      if (l.params.empty()) l.params = {Tensor(kshape), Tensor({l.filters})};
      if (l.params.size() != 2 || l.params[0].shape() != kshape || l.params[1].shape() != Shape{l.filters}) {
        layer_error(l, index, "parameter shapes do not match kernel " + shape_to_string(kshape));
      }
      break;
    }
    case LayerKind::MaxPool2D: {
      if (in.size() != 3) layer_error(l, index, "expects [h,w,c] input, got " + shape_to_string(in));
      if (l.pool == 0 || l.stride == 0 || in[0] < l.pool || in[1] < l.pool) {
        layer_error(l, index, "invalid pool window for input " + shape_to_string(in));
      }
      l.output_shape = {(in[0] - l.pool) / l.stride + 1, (in[1] - l.pool) / l.stride + 1, in[2]};
      if (!l.params.empty()) layer_error(l, index, "has no parameters");
      break;
    }
    case LayerKind::Flatten:
      l.output_shape = {shape_size(in)};
      if (!l.params.empty()) layer_error(l, index, "has no parameters");
      break;
    case LayerKind::LeakyReLU:
      if (!(l.slope > 0.0 && l.slope < 1.0)) layer_error(l, index, "slope must lie in (0,1)");
      [[fallthrough]];
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      if (l.kind == LayerKind::Softmax && in.size() != 1) {
        layer_error(l, index, "expects rank-1 input, got " + shape_to_string(in));
      }
      l.output_shape = in;
      if (!l.params.empty()) layer_error(l, index, "has no parameters");
      break;
    default:
      layer_error(l, index, "unknown layer kind");
  }
}

}  // namespace

Network::Network(Shape input_shape) : input_shape_(std::move(input_shape)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) throw std::invalid_argument("empty input shape");
}

Shape Network::current_shape() const { return layers_.empty() ? input_shape_ : layers_.back().output_shape; }

Shape Network::output_shape() const { return current_shape(); }

Layer& Network::push(Layer layer) {
  layer.input_shape = current_shape();
  infer_layer(layer, layers_.size());
  layers_.push_back(std::move(layer));
  return layers_.back();
}

Network& Network::add_layer(Layer layer) {
  push(std::move(layer));
  return *this;
}

Network& Network::add_dense(std::size_t units) {
  Layer l;
  l.kind = LayerKind::Dense;
  l.units = units;
  push(std::move(l));
  return *this;
}

Network& Network::add_conv2d(std::size_t kernel_h, std::size_t kernel_w, std::size_t filters, std::size_t stride,
                             Padding padding) {
  Layer l;
  l.kind = LayerKind::Conv2D;
  l.kernel_h = kernel_h;
  l.kernel_w = kernel_w;
  l.filters = filters;
  l.stride = stride;
  l.padding = padding;
  push(std::move(l));
  return *this;
}

Network& Network::add_relu() {
  Layer l;
  l.kind = LayerKind::ReLU;
  push(std::move(l));
  return *this;
}

Network& Network::add_leaky_relu(double slope) {
  Layer l;
  l.kind = LayerKind::LeakyReLU;
  l.slope = slope;
  push(std::move(l));
  return *this;
}

Network& Network::add_flatten() {
  Layer l;
  l.kind = LayerKind::Flatten;
  push(std::move(l));
  return *this;
}

Network& Network::add_maxpool2d(std::size_t pool, std::size_t stride) {
  Layer l;
  l.kind = LayerKind::MaxPool2D;
  l.pool = pool;
  l.stride = stride;
  push(std::move(l));
  return *this;
}

Network& Network::add_softmax() {
  Layer l;
  l.kind = LayerKind::Softmax;
  push(std::move(l));
  return *this;
}

void Network::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    if (!l.has_params()) continue;
    double fan_in = 0, fan_out = 0;
    if (l.kind == LayerKind::Dense) {
      fan_in = static_cast<double>(l.input_shape[0]);
      fan_out = static_cast<double>(l.units);
    } else {
      const double area = static_cast<double>(l.kernel_h * l.kernel_w);
      fan_in = area * static_cast<double>(l.input_shape[2]);
      fan_out = area * static_cast<double>(l.filters);
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(stream_seed(seed, {0x1417ULL, i}));
    for (double& w : l.params[0].data()) w = rng.uniform(-limit, limit);
    std::fill(l.params[1].data().begin(), l.params[1].data().end(), 0.0);
  }
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.parameter_count();
  return n;
}

std::vector<std::size_t> Network::parametric_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].has_params()) out.push_back(i);
  return out;
}

Gradients Network::zero_gradients() const {
  Gradients g(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (const auto& p : layers_[i].params) g[i].emplace_back(p.shape());
  return g;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

Shape batched(std::size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

Tensor layer_forward(const Layer& l, const Tensor& in, std::vector<std::size_t>* argmax) {
  const std::size_t n = in.dim(0);
  Tensor out(batched(n, l.output_shape));
  const double* x = in.data().data();
  double* y = out.data().data();
  switch (l.kind) {
    case LayerKind::Dense: {
      const std::size_t ni = l.input_shape[0], no = l.units;
      const double* w = l.params[0].data().data();
      const double* b = l.params[1].data().data();
      for (std::size_t s = 0; s < n; ++s) {
        double* row = y + s * no;
        std::copy(b, b + no, row);
        const double* xs = x + s * ni;
        for (std::size_t i = 0; i < ni; ++i) {
          const double xi = xs[i];
          if (xi == 0.0) continue;
          const double* wi = w + i * no;
          for (std::size_t o = 0; o < no; ++o) row[o] += xi * wi[o];
        }
      }
      break;
    }
    case LayerKind::Conv2D: {
      const auto g = conv_geometry(l);
      const double* k = l.params[0].data().data();
      const double* b = l.params[1].data().data();
      for (std::size_t s = 0; s < n; ++s) {
        const double* xs = x + s * g.in_h * g.in_w * g.in_c;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            double* row = y + ((s * g.out_h + oy) * g.out_w + ox) * g.out_c;
            std::copy(b, b + g.out_c, row);
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad_top);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad_left);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                const double* xp = xs + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
                const double* kp = k + (ky * g.kw + kx) * g.in_c * g.out_c;
                for (std::size_t ci = 0; ci < g.in_c; ++ci) {
                  const double xv = xp[ci];
                  const double* kc = kp + ci * g.out_c;
                  for (std::size_t co = 0; co < g.out_c; ++co) row[co] += xv * kc[co];
                }
              }
            }
          }
        }
      }
      break;
    }
    case LayerKind::MaxPool2D: {
      const std::size_t h = l.input_shape[0], w = l.input_shape[1], c = l.input_shape[2];
      const std::size_t oh = l.output_shape[0], ow = l.output_shape[1];
      if (argmax) argmax->assign(out.size(), 0);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              double best = -std::numeric_limits<double>::infinity();
              std::size_t best_at = 0;
              for (std::size_t py = 0; py < l.pool; ++py) {
                for (std::size_t px = 0; px < l.pool; ++px) {
                  const std::size_t at = ((s * h + oy * l.stride + py) * w + ox * l.stride + px) * c + ch;
                  if (x[at] > best) {
                    best = x[at];
                    best_at = at;
                  }
                }
              }
              const std::size_t o = ((s * oh + oy) * ow + ox) * c + ch;
              y[o] = best;
              if (argmax) (*argmax)[o] = best_at;
            }
          }
        }
      }
      break;
    }
    case LayerKind::ReLU:
      for (std::size_t i = 0; i < in.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case LayerKind::LeakyReLU:
      for (std::size_t i = 0; i < in.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : l.slope * x[i];
      break;
    case LayerKind::Flatten:
      std::copy(x, x + in.size(), y);
      break;
    case LayerKind::Softmax: {
      const std::size_t m = l.output_shape[0];
      for (std::size_t s = 0; s < n; ++s) {
        const double* xs = x + s * m;
        double* ys = y + s * m;
        const double mx = *std::max_element(xs, xs + m);
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) sum += (ys[j] = std::exp(xs[j] - mx));
        for (std::size_t j = 0; j < m; ++j) ys[j] /= sum;
      }
      break;
    }
  }
  return out;
}

// Accumulates parameter gradients into `pgrad` and returns the input gradient.
Tensor layer_backward(const Layer& l, const Tensor& in, const Tensor& out, const Tensor& gout,
                      const std::vector<std::size_t>& argmax, std::vector<Tensor>& pgrad) {
  const std::size_t n = in.dim(0);
  Tensor gin(in.shape());
  const double* x = in.data().data();
  const double* y = out.data().data();
  const double* g = gout.data().data();
  double* gi = gin.data().data();
  switch (l.kind) {
    case LayerKind::Dense: {
      const std::size_t ni = l.input_shape[0], no = l.units;
      const double* w = l.params[0].data().data();
      double* gw = pgrad[0].data().data();
      double* gb = pgrad[1].data().data();
      for (std::size_t s = 0; s < n; ++s) {
        const double* gs = g + s * no;
        const double* xs = x + s * ni;
        double* gis = gi + s * ni;
        for (std::size_t o = 0; o < no; ++o) gb[o] += gs[o];
        for (std::size_t i = 0; i < ni; ++i) {
          const double* wi = w + i * no;
          double* gwi = gw + i * no;
          const double xi = xs[i];
          double acc = 0.0;
          for (std::size_t o = 0; o < no; ++o) {
            gwi[o] += xi * gs[o];
            acc += wi[o] * gs[o];
          }
          gis[i] = acc;
        }
      }
      break;
    }
    case LayerKind::Conv2D: {
      const auto geo = conv_geometry(l);
      const double* k = l.params[0].data().data();
      double* gk = pgrad[0].data().data();
      double* gb = pgrad[1].data().data();
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t in_off = s * geo.in_h * geo.in_w * geo.in_c;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const double* gs = g + ((s * geo.out_h + oy) * geo.out_w + ox) * geo.out_c;
            for (std::size_t co = 0; co < geo.out_c; ++co) gb[co] += gs[co];
            for (std::size_t ky = 0; ky < geo.kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                        static_cast<std::ptrdiff_t>(geo.pad_top);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.in_h)) continue;
              for (std::size_t kx = 0; kx < geo.kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                          static_cast<std::ptrdiff_t>(geo.pad_left);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.in_w)) continue;
                const std::size_t xo =
                    in_off + (static_cast<std::size_t>(iy) * geo.in_w + static_cast<std::size_t>(ix)) * geo.in_c;
                const std::size_t ko = (ky * geo.kw + kx) * geo.in_c * geo.out_c;
                for (std::size_t ci = 0; ci < geo.in_c; ++ci) {
                  const double xv = x[xo + ci];
                  double acc = 0.0;
                  for (std::size_t co = 0; co < geo.out_c; ++co) {
                    gk[ko + ci * geo.out_c + co] += xv * gs[co];
                    acc += k[ko + ci * geo.out_c + co] * gs[co];
                  }
                  gi[xo + ci] += acc;
                }
              }
            }
          }
        }
      }
      break;
    }
    case LayerKind::MaxPool2D:
      for (std::size_t o = 0; o < out.size(); ++o) gi[argmax[o]] += g[o];
      break;
    case LayerKind::ReLU:
      for (std::size_t i = 0; i < in.size(); ++i) gi[i] = x[i] > 0.0 ? g[i] : 0.0;
      break;
    case LayerKind::LeakyReLU:
      for (std::size_t i = 0; i < in.size(); ++i) gi[i] = x[i] > 0.0 ? g[i] : l.slope * g[i];
      break;
    case LayerKind::Flatten:
      std::copy(g, g + in.size(), gi);
      break;
    case LayerKind::Softmax: {
      const std::size_t m = l.output_shape[0];
      for (std::size_t s = 0; s < n; ++s) {
        const double* ys = y + s * m;
        const double* gs = g + s * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += ys[j] * gs[j];
        for (std::size_t j = 0; j < m; ++j) gi[s * m + j] = ys[j] * (gs[j] - dot);
      }
      break;
    }
  }
  return gin;
}

void check_input(const Network& net, const Tensor& inputs) {
  if (inputs.rank() < 1 || inputs.dim(0) == 0) throw std::invalid_argument("batch must contain at least one sample");
  const std::size_t per = inputs.row_size();
  if (per != shape_size(net.input_shape())) {
    throw std::invalid_argument("input rows of size " + std::to_string(per) + " do not match network input " +
                                shape_to_string(net.input_shape()));
  }
}

Tensor flatten_rows(Tensor t) {
  const std::size_t n = t.dim(0);
  const std::size_t m = t.row_size();
  return t.reshaped({n, m});
}

// Cheap per-call consistency check so a malformed stack fails with the layer's name.
void check_layer(const Layer& l, std::size_t index, std::size_t incoming) {
  if (incoming != shape_size(l.input_shape)) {
    layer_error(l, index, "receives " + std::to_string(incoming) + " values per sample, expects " +
                              shape_to_string(l.input_shape));
  }
  Shape w, b;
  if (l.kind == LayerKind::Dense) {
    w = {l.input_shape.at(0), l.units};
    b = {l.units};
  } else if (l.kind == LayerKind::Conv2D) {
    w = {l.kernel_h, l.kernel_w, l.input_shape.at(2), l.filters};
    b = {l.filters};
  } else {
    if (!l.params.empty()) layer_error(l, index, "has no parameters");
    return;
  }
  if (l.params.size() != 2 || l.params[0].shape() != w || l.params[1].shape() != b) {
    layer_error(l, index, "parameter shapes do not match " + shape_to_string(w) + " + " + shape_to_string(b));
  }
}

Tensor run_layers(const Network& net, std::size_t first, Tensor act) {
  const auto& layers = net.layers();
  for (std::size_t i = first; i < layers.size(); ++i) {
    check_layer(layers[i], i, act.row_size());
    const Shape want = batched(act.dim(0), layers[i].input_shape);
    if (act.shape() != want) act = act.reshaped(want);
    act = layer_forward(layers[i], act, nullptr);
  }
  return flatten_rows(std::move(act));
}

}  // namespace

Tensor forward(const Network& net, const Tensor& inputs) {
  check_input(net, inputs);
  return run_layers(net, 0, inputs.reshaped(batched(inputs.dim(0), net.input_shape())));
}

Tensor forward(const Network& net, const Batch& batch) { return forward(net, batch.inputs); }

Tensor forward_from(const Network& net, std::size_t first_layer, const Tensor& activation) {
  if (first_layer > net.layer_count()) throw std::out_of_range("forward_from: layer index out of range");
  const Shape& want = first_layer < net.layer_count() ? net.layers()[first_layer].input_shape : net.output_shape();
  if (activation.rank() < 1 || activation.row_size() != shape_size(want)) {
    throw std::invalid_argument("forward_from: activation does not match input of layer " +
                                std::to_string(first_layer));
  }
  return run_layers(net, first_layer, activation);
}

ForwardTrace forward_trace(const Network& net, const Tensor& inputs) {
  check_input(net, inputs);
  ForwardTrace t;
  const auto& layers = net.layers();
  t.activations.reserve(layers.size() + 1);
  t.argmax.resize(layers.size());
  t.activations.push_back(inputs.reshaped(batched(inputs.dim(0), net.input_shape())));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check_layer(layers[i], i, t.activations.back().row_size());
    t.activations.push_back(layer_forward(layers[i], t.activations.back(), &t.argmax[i]));
  }
  return t;
}

Gradients backward_from_output(const Network& net, const ForwardTrace& trace, const Tensor& output_grad) {
  const auto& layers = net.layers();
  if (output_grad.size() != trace.activations.back().size()) {
    throw std::invalid_argument("output gradient does not match network output");
  }
  Gradients grads = net.zero_gradients();
  Tensor g = output_grad.reshaped(trace.activations.back().shape());
  for (std::size_t i = layers.size(); i-- > 0;) {
    g = layer_backward(layers[i], trace.activations[i], trace.activations[i + 1], g, trace.argmax[i], grads[i]);
  }
  return grads;
}

namespace {

bool ends_with_softmax(const Network& net) {
  return !net.layers().empty() && net.layers().back().kind == LayerKind::Softmax;
}

std::size_t class_label(const Tensor& targets, std::size_t s, std::size_t classes) {
  const double v = targets[s];
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(classes)) {
    throw std::invalid_argument("class target " + std::to_string(v) + " out of range");
  }
  return static_cast<std::size_t>(v);
}

const Tensor& require_targets(const Batch& batch) {
  if (!batch.targets) throw std::invalid_argument("loss requires targets");
  return *batch.targets;
}

// Returns (loss, dloss/doutput) for flattened outputs [n, m].
std::pair<double, Tensor> loss_and_grad(const Network& net, const Tensor& out, const Batch& batch, LossKind loss) {
  const Tensor& targets = require_targets(batch);
  const std::size_t n = out.dim(0), m = out.dim(1);
  Tensor grad(out.shape());
  double value = 0.0;
  if (loss == LossKind::Mse) {
    if (targets.size() != out.size()) throw std::invalid_argument("mse targets do not match output size");
    const double scale = 2.0 / static_cast<double>(n * m);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = out[i] - targets[i];
      value += d * d;
      grad[i] = scale * d;
    }
    return {value / static_cast<double>(n * m), std::move(grad)};
  }
  if (targets.size() != n) throw std::invalid_argument("cross entropy expects one class index per sample");
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t t = class_label(targets, s, m);
    const double* row = out.data().data() + s * m;
    double* grow = grad.data().data() + s * m;
    if (ends_with_softmax(net)) {
      const double p = std::max(row[t], 1e-300);
      value -= std::log(p);
      grow[t] = -inv_n / p;
    } else {
      const double mx = *std::max_element(row, row + m);
      double sum = 0.0;
      for (std::size_t j = 0; j < m; ++j) sum += std::exp(row[j] - mx);
      const double log_z = mx + std::log(sum);
      value -= row[t] - log_z;
      for (std::size_t j = 0; j < m; ++j) grow[j] = inv_n * std::exp(row[j] - log_z);
      grow[t] -= inv_n;
    }
  }
  return {value * inv_n, std::move(grad)};
}

}  // namespace

Gradients backward(const Network& net, const Batch& batch, LossKind loss) {
  require_targets(batch);
  ForwardTrace trace = forward_trace(net, batch.inputs);
  const Tensor out = flatten_rows(trace.activations.back());
  auto [value, grad] = loss_and_grad(net, out, batch, loss);
  (void)value;
  return backward_from_output(net, trace, grad);
}

double loss_value(const Network& net, const Batch& batch, LossKind loss) {
  return loss_and_grad(net, forward(net, batch.inputs), batch, loss).first;
}

double mse(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mse: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

void sgd_step(Network& net, const Gradients& grads, double lr, const SparsityMask* mask) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  auto& layers = net.layers();
  if (grads.size() != layers.size()) throw std::invalid_argument("gradient set does not match network");
  if (mask) mask->check_matches(net);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& params = layers[i].params;
    if (grads[i].size() != params.size()) throw std::invalid_argument("gradient set does not match layer " + std::to_string(i));
    for (std::size_t t = 0; t < params.size(); ++t) {
      if (grads[i][t].shape() != params[t].shape()) {
        throw std::invalid_argument("gradient shape mismatch at " + layers[i].name(i));
      }
      auto& w = params[t].data();
      const auto& g = grads[i][t].data();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
      if (mask) {
        const auto& bits = mask->bits(i, t);
        for (std::size_t k = 0; k < w.size(); ++k)
          if (bits[k]) w[k] = 0.0;
      }
    }
  }
}

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

double accuracy(const Network& net, const Tensor& inputs, std::span<const std::size_t> labels) {
  if (inputs.rank() == 0 || inputs.dim(0) == 0) throw std::invalid_argument("accuracy: empty dataset");
  if (labels.size() != inputs.dim(0)) throw std::invalid_argument("accuracy: label count does not match inputs");
  const Tensor out = forward(net, inputs);
  const std::size_t m = out.dim(1);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (argmax_row(std::span<const double>(out.data()).subspan(s * m, m)) == labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace devolve
