#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "devolve/tensor.hpp"

namespace devolve {

class SparsityMask;

enum class LayerKind : std::uint8_t {
  Dense = 1,
  Conv2D = 2,
  LeakyReLU = 3,
  ReLU = 4,
  Flatten = 5,
  MaxPool2D = 6,
  Softmax = 7,
};

enum class Padding : std::uint8_t { Valid = 0, Same = 1 };

enum class LossKind { Mse, CrossEntropy };

std::string to_string(LayerKind kind);

/// One layer with its hyperparameters and parameter tensors.
///
/// Per-sample shapes exclude the batch axis. Dense consumes rank-1 input
/// [in] and holds weights [in, out] and bias [out]. Conv2D consumes NHWC
/// input [h, w, cin] and holds kernel [kh, kw, cin, cout] and bias [cout].
struct Layer {
  LayerKind kind = LayerKind::ReLU;
  Shape input_shape;
  Shape output_shape;

  std::size_t units = 0;        // Dense output width
  std::size_t kernel_h = 0;     // Conv2D
  std::size_t kernel_w = 0;     // Conv2D
  std::size_t filters = 0;      // Conv2D output channels
  std::size_t stride = 1;       // Conv2D, MaxPool2D
  std::size_t pool = 2;         // MaxPool2D window
  Padding padding = Padding::Valid;
  double slope = 0.01;          // LeakyReLU

  std::vector<Tensor> params;

  bool has_params() const { return !params.empty(); }
  std::size_t parameter_count() const;
  std::string name(std::size_t index) const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Gradients, one tensor per parameter tensor, indexed [layer][tensor].
using Gradients = std::vector<std::vector<Tensor>>;

/// Ordered stack of layers with shape inference.
class Network {
 public:
  Network() = default;
  explicit Network(Shape input_shape);

  Network& add_dense(std::size_t units);
  Network& add_conv2d(std::size_t kernel_h, std::size_t kernel_w, std::size_t filters, std::size_t stride = 1,
                      Padding padding = Padding::Valid);
  Network& add_relu();
  Network& add_leaky_relu(double slope);
  Network& add_flatten();
  Network& add_maxpool2d(std::size_t pool, std::size_t stride);
  Network& add_softmax();

  /// Appends a fully formed layer; shapes are validated against the stack.
  Network& add_layer(Layer layer);

  /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  void initialize(std::uint64_t seed);

  const Shape& input_shape() const { return input_shape_; }
  Shape output_shape() const;
  std::size_t output_size() const { return shape_size(output_shape()); }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }

  std::size_t parameter_count() const;

  /// Indices of layers that hold parameters.
  std::vector<std::size_t> parametric_layers() const;

  Gradients zero_gradients() const;

  friend bool operator==(const Network&, const Network&) = default;

 private:
  Layer& push(Layer layer);
  Shape current_shape() const;

  Shape input_shape_;
  std::vector<Layer> layers_;
};

struct Batch {
  Tensor inputs;
  std::optional<Tensor> targets;  // class indices [n] or regression targets [n, out]

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
};

/// Per-layer activations of a forward pass; `activations[i]` is the input
/// of layer i and `activations.back()` the network output.
struct ForwardTrace {
  std::vector<Tensor> activations;
  std::vector<std::vector<std::size_t>> argmax;  // MaxPool2D winners per layer
};

/// Output of the network for a batch of inputs [n, ...input_shape], flattened to [n, out_dim].
Tensor forward(const Network& net, const Tensor& inputs);
Tensor forward(const Network& net, const Batch& batch);

/// Runs layers [first_layer, end) starting from `activation` (the input of
/// `first_layer`). Output is flattened to [n, out_dim].
Tensor forward_from(const Network& net, std::size_t first_layer, const Tensor& activation);

ForwardTrace forward_trace(const Network& net, const Tensor& inputs);

/// Gradients of the loss for `batch`. Mse expects targets shaped like the
/// output; CrossEntropy expects class indices [n]. Cross entropy applies a
/// softmax to the outputs unless the last layer is already Softmax.
Gradients backward(const Network& net, const Batch& batch, LossKind loss);

/// Backpropagates an explicit output gradient [n, out_dim] through a trace.
Gradients backward_from_output(const Network& net, const ForwardTrace& trace, const Tensor& output_grad);

/// Mean loss over the batch (and over output elements for Mse).
double loss_value(const Network& net, const Batch& batch, LossKind loss);
double mse(const Tensor& a, const Tensor& b);

/// w <- w - lr * g. Masked positions are forced to exactly 0.0.
void sgd_step(Network& net, const Gradients& grads, double lr, const SparsityMask* mask = nullptr);

/// Fraction of argmax-correct rows; ties break to the lowest class index.
double accuracy(const Network& net, const Tensor& inputs, std::span<const std::size_t> labels);
std::size_t argmax_row(std::span<const double> row);

}  // namespace devolve
