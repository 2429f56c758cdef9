#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "issnet/rng.hpp"
#include "issnet/tensor.hpp"

namespace issnet {

enum class Activation { tanh, relu, softplus, sigmoid };
enum class PoolKind { max, average };
enum class LossKind { mse, softmax_cross_entropy };

struct LayerSpec;

/// Fully connected; weight stored out x in.
struct DenseSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
};

/// Square-kernel convolution; weight stored c_out x c_in x k x k.
struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

struct ActivationSpec {
  Activation fn = Activation::relu;
};

/// Non-overlapping pooling (stride equals window); trailing rows/columns that
/// do not fill a window are dropped.
struct PoolSpec {
  PoolKind kind = PoolKind::max;
  std::size_t window = 2;
};

struct FlattenSpec {};

/// out = x + inner(x); inner must preserve the per-sample shape.
struct ResidualSpec {
  std::vector<LayerSpec> inner;
};

struct LayerSpec {
  std::variant<DenseSpec, ConvSpec, ActivationSpec, PoolSpec, FlattenSpec, ResidualSpec> kind;

  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true) { return {DenseSpec{in, out, bias}}; }
  static LayerSpec conv(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0, bool bias = true) {
    return {ConvSpec{c_in, c_out, kernel, stride, padding, bias}};
  }
  static LayerSpec activation(Activation fn) { return {ActivationSpec{fn}}; }
  static LayerSpec max_pool(std::size_t window) { return {PoolSpec{PoolKind::max, window}}; }
  static LayerSpec avg_pool(std::size_t window) { return {PoolSpec{PoolKind::average, window}}; }
  static LayerSpec flatten() { return {FlattenSpec{}}; }
  static LayerSpec residual(std::vector<LayerSpec> inner) { return {ResidualSpec{std::move(inner)}}; }

  bool parameterized() const {
    return std::holds_alternative<DenseSpec>(kind) || std::holds_alternative<ConvSpec>(kind);
  }
};

struct NetworkSpec {
  Shape input;  // per-sample shape, e.g. {784} or {1, 28, 28}
  std::vector<LayerSpec> layers;
  LossKind loss = LossKind::softmax_cross_entropy;
};

/// One parameterized layer in depth-first order. Top-level layer i is named
/// "L<i>", inner layer j of a residual block at i is "L<i>.<j>".
struct ParamSlot {
  std::string name;
  Shape weight_shape;
  bool has_bias = false;
  bool conv = false;
  std::size_t fan_in = 0;
};

struct LayerParams {
  std::string name;
  Tensor weight;
  Tensor bias;  // shape {out} when has_bias, otherwise empty
  bool conv = false;
  bool has_bias = false;
};

/// Weights (and biases) of every parameterized layer, in ParamSlot order.
struct ParamSet {
  std::vector<LayerParams> layers;

  std::size_t size() const { return layers.size(); }
  LayerParams& operator[](std::size_t i) { return layers[i]; }
  const LayerParams& operator[](std::size_t i) const { return layers[i]; }
  /// Index of the layer named `name`; throws NotFoundError.
  std::size_t index_of(const std::string& name) const;
  std::size_t parameter_count() const;
  /// Same layout, all values zero.
  ParamSet zeros_like() const;
};

bool bitwise_equal(const ParamSet& a, const ParamSet& b);

/// Supervision for a batch: class indices for cross-entropy, a batch x out
/// tensor for mean squared error.
struct Targets {
  std::vector<std::size_t> classes;
  Tensor values;

  std::size_t size() const { return classes.empty() ? (values.rank() ? values.extent(0) : 0) : classes.size(); }
  Targets select(std::span<const std::size_t> rows) const;
};

/// Per-sample output shape of a layer; throws DimensionError on mismatch.
Shape output_shape(const LayerSpec& layer, const Shape& input);
/// Per-sample output shape of the whole stack; validates every layer.
Shape output_shape(const NetworkSpec& net);

std::vector<ParamSlot> parameter_slots(const NetworkSpec& net);

/// He-normal weights (variance 2 / fan-in), zero biases.
ParamSet init_params(const NetworkSpec& net, SeededRng& rng);

/// Checks that every tensor in `params` matches the network's slots.
void validate_params(const NetworkSpec& net, const ParamSet& params);

/// Activations retained by forward() for the matching backward().
class Workspace {
 public:
  struct Record {
    Tensor input;
    Tensor output;
    std::vector<double> columns;       // conv: im2col of every sample
    std::vector<std::size_t> argmax;   // max-pool: source index per output
    std::size_t param_index = 0;
  };

  void clear() {
    records_.clear();
    logits_ = Tensor();
  }
  const Tensor& logits() const { return logits_; }

 private:
  friend struct NetworkPass;
  friend double forward(const NetworkSpec&, const ParamSet&, const Tensor&, const Targets&, Workspace&);
  friend ParamSet backward(const NetworkSpec&, const ParamSet&, const Targets&, const Workspace&);
  std::vector<Record> records_;
  Tensor logits_;
};

/// Network outputs for a batch (batch x output extents). No loss.
Tensor predict(const NetworkSpec& net, const ParamSet& params, const Tensor& x);

/// Batch-mean loss; activations stored in `ws`.
/// Cross-entropy: mean of -log softmax(logits)[y]. MSE: mean of 0.5 |out - y|^2.
double forward(const NetworkSpec& net, const ParamSet& params, const Tensor& x, const Targets& y, Workspace& ws);

/// Exact gradient of the batch-mean loss from the last forward() into `ws`.
ParamSet backward(const NetworkSpec& net, const ParamSet& params, const Targets& y, const Workspace& ws);

struct LossAndGradient {
  double loss = 0.0;
  ParamSet gradient;
};
LossAndGradient loss_and_gradient(const NetworkSpec& net, const ParamSet& params, const Tensor& x, const Targets& y);

/// Multiplies each layer's weights (not biases) by its factor. Factors must be
/// strictly positive; one per parameterized layer.
ParamSet scale_layers(const ParamSet& params, std::span<const double> factors);

}  // namespace issnet
