#include "issnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "issnet/errors.hpp"
#include "issnet/linalg.hpp"

namespace issnet {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

kernels::ConvGeometry geometry(const ConvSpec& c, const Shape& in) {
  return {in[0], in[1], in[2], c.kernel, c.kernel, c.stride, c.padding};
}

double activate(Activation fn, double x) {
  switch (fn) {
    case Activation::tanh:
      return std::tanh(x);
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::softplus:
      return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    case Activation::sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return x;
}

// Derivative expressed through the pre-activation x and output y.
double activate_derivative(Activation fn, double x, double y) {
  switch (fn) {
    case Activation::tanh:
      return 1.0 - y * y;
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::softplus:
      return activate(Activation::sigmoid, x);
    case Activation::sigmoid:
      return y * (1.0 - y);
  }
  return 1.0;
}

Shape with_batch(std::size_t batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

Shape sample_shape(const Tensor& batch) { return Shape(batch.shape().begin() + 1, batch.shape().end()); }

void collect_slots(const std::vector<LayerSpec>& layers, Shape shape, const std::string& prefix,
                   std::vector<ParamSlot>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const std::string name = prefix + std::to_string(i);
    if (const auto* d = std::get_if<DenseSpec>(&layer.kind)) {
      out.push_back({name, {d->out, d->in}, d->bias, false, d->in});
    } else if (const auto* c = std::get_if<ConvSpec>(&layer.kind)) {
      out.push_back({name,
                     {c->out_channels, c->in_channels, c->kernel, c->kernel},
                     c->bias,
                     true,
                     c->in_channels * c->kernel * c->kernel});
    } else if (const auto* r = std::get_if<ResidualSpec>(&layer.kind)) {
      collect_slots(r->inner, shape, name + ".", out);
    }
    shape = output_shape(layer, shape);
  }
}

}  // namespace

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return i;
  throw NotFoundError("no parameterized layer named " + name);
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out = *this;
  for (auto& l : out.layers) {
    l.weight.fill(0.0);
    l.bias.fill(0.0);
  }
  return out;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].has_bias != b[i].has_bias) return false;
    if (!bitwise_equal(a[i].weight, b[i].weight) || !bitwise_equal(a[i].bias, b[i].bias)) return false;
  }
  return true;
}

Targets Targets::select(std::span<const std::size_t> rows) const {
  Targets out;
  if (!classes.empty()) {
    out.classes.reserve(rows.size());
    for (std::size_t r : rows) out.classes.push_back(classes.at(r));
    return out;
  }
  const std::size_t width = values.size() / std::max<std::size_t>(values.extent(0), 1);
  Shape shape = values.shape();
  shape[0] = rows.size();
  out.values = Tensor(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(values.data() + rows[i] * width, width, out.values.data() + i * width);
  return out;
}

Shape output_shape(const LayerSpec& layer, const Shape& in) {
  return std::visit(
      Overloaded{
          [&](const DenseSpec& d) -> Shape {
            if (in.size() != 1 || in[0] != d.in)
              throw DimensionError("dense layer expects [" + std::to_string(d.in) + "], got " + shape_to_string(in));
            return {d.out};
          },
          [&](const ConvSpec& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels)
              throw DimensionError("conv layer expects " + std::to_string(c.in_channels) + " channels, got " +
                                   shape_to_string(in));
            const auto g = geometry(c, in);
            g.validate();
            return {c.out_channels, g.out_h(), g.out_w()};
          },
          [&](const ActivationSpec&) -> Shape { return in; },
          [&](const PoolSpec& p) -> Shape {
            if (in.size() != 3 || p.window == 0 || in[1] < p.window || in[2] < p.window)
              throw DimensionError("pool window " + std::to_string(p.window) + " does not fit " + shape_to_string(in));
            return {in[0], in[1] / p.window, in[2] / p.window};
          },
          [&](const FlattenSpec&) -> Shape { return {shape_size(in)}; },
          [&](const ResidualSpec& r) -> Shape {
            Shape s = in;
            for (const auto& l : r.inner) s = output_shape(l, s);
            if (s != in)
              throw DimensionError("residual block maps " + shape_to_string(in) + " to " + shape_to_string(s));
            return in;
          },
      },
      layer.kind);
}

Shape output_shape(const NetworkSpec& net) {
  Shape s = net.input;
  for (const auto& l : net.layers) s = output_shape(l, s);
  return s;
}

std::vector<ParamSlot> parameter_slots(const NetworkSpec& net) {
  std::vector<ParamSlot> slots;
  collect_slots(net.layers, net.input, "L", slots);
  return slots;
}

ParamSet init_params(const NetworkSpec& net, SeededRng& rng) {
  ParamSet params;
  for (const auto& slot : parameter_slots(net)) {
    LayerParams lp{slot.name, Tensor(slot.weight_shape), Tensor(), slot.conv, slot.has_bias};
    const double stddev = slot.fan_in ? std::sqrt(2.0 / static_cast<double>(slot.fan_in)) : 0.0;
    for (double& w : lp.weight.values()) w = rng.normal(0.0, stddev);
    if (slot.has_bias) lp.bias = Tensor({slot.weight_shape[0]});
    params.layers.push_back(std::move(lp));
  }
  return params;
}

void validate_params(const NetworkSpec& net, const ParamSet& params) {
  const auto slots = parameter_slots(net);
  if (slots.size() != params.size())
    throw DimensionError("network has " + std::to_string(slots.size()) + " parameterized layers, params hold " +
                         std::to_string(params.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& p = params[i];
    if (p.weight.shape() != slots[i].weight_shape)
      throw DimensionError(slots[i].name + ": weight " + shape_to_string(p.weight.shape()) + ", expected " +
                           shape_to_string(slots[i].weight_shape));
    if (p.has_bias != slots[i].has_bias || (p.has_bias && p.bias.shape() != Shape{slots[i].weight_shape[0]}))
      throw DimensionError(slots[i].name + ": bias does not match layer");
  }
}

// Forward/backward executor. Records are appended in execution order and
// consumed in reverse by the backward pass.
struct NetworkPass {
  const ParamSet& params;
  Workspace* ws;  // null for inference
  std::size_t cursor = 0;

  Tensor run(const std::vector<LayerSpec>& layers, Tensor x) {
    for (const auto& layer : layers) x = run_layer(layer, std::move(x));
    return x;
  }

  Workspace::Record& push(const Tensor& input) {
    ws->records_.push_back({});
    ws->records_.back().input = input;
    return ws->records_.back();
  }

  Tensor run_layer(const LayerSpec& layer, Tensor x) {
    const std::size_t batch = x.extent(0);
    const Shape in = sample_shape(x);
    const Shape out_shape = output_shape(layer, in);
    Tensor y(with_batch(batch, out_shape));

    if (const auto* d = std::get_if<DenseSpec>(&layer.kind)) {
      const LayerParams& p = params[cursor];
      kernels::gemm_nt(batch, d->out, d->in, x.data(), p.weight.data(), y.data());
      if (p.has_bias)
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < d->out; ++o) y[b * d->out + o] += p.bias[o];
      if (ws) push(x).param_index = cursor;
      ++cursor;
    } else if (const auto* c = std::get_if<ConvSpec>(&layer.kind)) {
      const LayerParams& p = params[cursor];
      const auto g = geometry(*c, in);
      const std::size_t plane = g.out_h() * g.out_w();
      const std::size_t in_size = shape_size(in);
      std::vector<double> columns(batch * g.patch() * plane);
      for (std::size_t b = 0; b < batch; ++b) {
        double* cols = columns.data() + b * g.patch() * plane;
        kernels::im2col(g, x.data() + b * in_size, cols);
        double* yb = y.data() + b * c->out_channels * plane;
        kernels::gemm_nn(c->out_channels, plane, g.patch(), p.weight.data(), cols, yb);
        if (p.has_bias)
          for (std::size_t o = 0; o < c->out_channels; ++o)
            for (std::size_t q = 0; q < plane; ++q) yb[o * plane + q] += p.bias[o];
      }
      if (ws) {
        auto& rec = push(x);
        rec.columns = std::move(columns);
        rec.param_index = cursor;
      }
      ++cursor;
    } else if (const auto* a = std::get_if<ActivationSpec>(&layer.kind)) {
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(a->fn, x[i]);
      if (ws) push(x).output = y;
    } else if (const auto* pool = std::get_if<PoolSpec>(&layer.kind)) {
      const std::size_t ch = in[0], h = in[1], w = in[2], k = pool->window;
      const std::size_t oh = out_shape[1], ow = out_shape[2];
      std::vector<std::size_t> argmax;
      if (pool->kind == PoolKind::max) argmax.resize(y.size());
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c2 = 0; c2 < ch; ++c2)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::size_t out_idx = ((b * ch + c2) * oh + oy) * ow + ox;
              const std::size_t base = (b * ch + c2) * h * w;
              if (pool->kind == PoolKind::max) {
                // Strict comparison in row-major scan: ties go to the first index.
                std::size_t best = base + (oy * k) * w + ox * k;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t idx = base + (oy * k + i) * w + ox * k + j;
                    if (x[idx] > x[best]) best = idx;
                  }
                y[out_idx] = x[best];
                argmax[out_idx] = best;
              } else {
                double s = 0.0;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) s += x[base + (oy * k + i) * w + ox * k + j];
                y[out_idx] = s / static_cast<double>(k * k);
              }
            }
      if (ws) push(x).argmax = std::move(argmax);
    } else if (std::holds_alternative<FlattenSpec>(layer.kind)) {
      y = x.reshaped(with_batch(batch, out_shape));
      if (ws) push(x);
    } else if (const auto* r = std::get_if<ResidualSpec>(&layer.kind)) {
      if (ws) push(x);
      Tensor inner = run(r->inner, x);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + inner[i];
    }
    require_finite(y, "forward activation");
    return y;
  }

  // Backward over `layers`, consuming records from `pos` downwards.
  Tensor back(const std::vector<LayerSpec>& layers, Tensor dy, std::size_t& pos, ParamSet& grads) {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) dy = back_layer(*it, std::move(dy), pos, grads);
    return dy;
  }

  Tensor back_layer(const LayerSpec& layer, Tensor dy, std::size_t& pos, ParamSet& grads) {
    if (const auto* r = std::get_if<ResidualSpec>(&layer.kind)) {
      // The block's own record precedes its inner records.
      Tensor dinner = back(r->inner, dy, pos, grads);
      --pos;
      for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += dinner[i];
      return dy;
    }
    const Workspace::Record& rec = ws->records_[--pos];
    const Tensor& x = rec.input;
    const std::size_t batch = x.extent(0);
    const Shape in = sample_shape(x);
    Tensor dx(x.shape());

    if (const auto* d = std::get_if<DenseSpec>(&layer.kind)) {
      const LayerParams& p = params[rec.param_index];
      LayerParams& gp = grads[rec.param_index];
      kernels::gemm_tn(d->out, d->in, batch, dy.data(), x.data(), gp.weight.data());
      kernels::gemm_nn(batch, d->in, d->out, dy.data(), p.weight.data(), dx.data());
      if (p.has_bias)
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < d->out; ++o) gp.bias[o] += dy[b * d->out + o];
    } else if (const auto* c = std::get_if<ConvSpec>(&layer.kind)) {
      const LayerParams& p = params[rec.param_index];
      LayerParams& gp = grads[rec.param_index];
      const auto g = geometry(*c, in);
      const std::size_t plane = g.out_h() * g.out_w();
      const std::size_t in_size = shape_size(in);
      std::vector<double> dcols(g.patch() * plane);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* cols = rec.columns.data() + b * g.patch() * plane;
        const double* dyb = dy.data() + b * c->out_channels * plane;
        kernels::gemm_nt(c->out_channels, g.patch(), plane, dyb, cols, gp.weight.data());
        std::fill(dcols.begin(), dcols.end(), 0.0);
        kernels::gemm_tn(g.patch(), plane, c->out_channels, p.weight.data(), dyb, dcols.data());
        kernels::col2im(g, dcols.data(), dx.data() + b * in_size);
        if (p.has_bias)
          for (std::size_t o = 0; o < c->out_channels; ++o)
            for (std::size_t q = 0; q < plane; ++q) gp.bias[o] += dyb[o * plane + q];
      }
    } else if (const auto* a = std::get_if<ActivationSpec>(&layer.kind)) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * activate_derivative(a->fn, x[i], rec.output[i]);
    } else if (const auto* pool = std::get_if<PoolSpec>(&layer.kind)) {
      if (pool->kind == PoolKind::max) {
        for (std::size_t i = 0; i < dy.size(); ++i) dx[rec.argmax[i]] += dy[i];
      } else {
        const std::size_t ch = in[0], h = in[1], w = in[2], k = pool->window;
        const std::size_t oh = h / k, ow = w / k;
        const double scale = 1.0 / static_cast<double>(k * k);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c2 = 0; c2 < ch; ++c2)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const double gval = dy[((b * ch + c2) * oh + oy) * ow + ox] * scale;
                const std::size_t base = (b * ch + c2) * h * w;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) dx[base + (oy * k + i) * w + ox * k + j] += gval;
              }
      }
    } else if (std::holds_alternative<FlattenSpec>(layer.kind)) {
      dx = dy.reshaped(x.shape());
    }
    return dx;
  }
};

namespace {

void check_input(const NetworkSpec& net, const ParamSet& params, const Tensor& x) {
  validate_params(net, params);
  if (x.rank() != net.input.size() + 1 || sample_shape(x) != net.input)
    throw DimensionError("input " + shape_to_string(x.shape()) + " does not match network input " +
                         shape_to_string(net.input));
}

// Loss and d(loss)/d(output) for the batch mean.
double loss_value(const NetworkSpec& net, const Tensor& out, const Targets& y, Tensor* grad) {
  const std::size_t batch = out.extent(0);
  const std::size_t width = batch ? out.size() / batch : 0;
  if (y.size() != batch) throw DimensionError("targets hold " + std::to_string(y.size()) + " rows, batch is " +
                                              std::to_string(batch));
  if (grad) *grad = Tensor(out.shape());
  const double inv = batch ? 1.0 / static_cast<double>(batch) : 0.0;
  double total = 0.0;
  if (net.loss == LossKind::softmax_cross_entropy) {
    if (y.classes.size() != batch) throw DimensionError("cross-entropy needs one class index per sample");
    for (std::size_t b = 0; b < batch; ++b) {
      const double* z = out.data() + b * width;
      const std::size_t label = y.classes[b];
      if (label >= width) throw DimensionError("class index " + std::to_string(label) + " out of range");
      const double zmax = *std::max_element(z, z + width);
      double denom = 0.0;
      for (std::size_t j = 0; j < width; ++j) denom += std::exp(z[j] - zmax);
      total += std::log(denom) - (z[label] - zmax);
      if (grad)
        for (std::size_t j = 0; j < width; ++j)
          (*grad)[b * width + j] = (std::exp(z[j] - zmax) / denom - (j == label ? 1.0 : 0.0)) * inv;
    }
  } else {
    if (y.values.size() != out.size()) throw DimensionError("mse targets do not match output extent");
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out[i] - y.values[i];
      total += 0.5 * r * r;
      if (grad) (*grad)[i] = r * inv;
    }
  }
  const double loss = total * inv;
  if (!std::isfinite(loss)) throw NumericError("loss is not finite");
  return loss;
}

}  // namespace

Tensor predict(const NetworkSpec& net, const ParamSet& params, const Tensor& x) {
  check_input(net, params, x);
  NetworkPass pass{params, nullptr};
  return pass.run(net.layers, x);
}

double forward(const NetworkSpec& net, const ParamSet& params, const Tensor& x, const Targets& y, Workspace& ws) {
  check_input(net, params, x);
  ws.clear();
  NetworkPass pass{params, &ws};
  ws.logits_ = pass.run(net.layers, x);
  return loss_value(net, ws.logits_, y, nullptr);
}

ParamSet backward(const NetworkSpec& net, const ParamSet& params, const Targets& y, const Workspace& ws) {
  if (ws.logits().rank() == 0) throw ContractError("backward called before forward");
  Tensor dy;
  loss_value(net, ws.logits(), y, &dy);
  ParamSet grads = params.zeros_like();
  NetworkPass pass{params, const_cast<Workspace*>(&ws)};
  std::size_t pos = ws.records_.size();
  pass.back(net.layers, std::move(dy), pos, grads);
  for (const auto& g : grads.layers) {
    require_finite(g.weight, "gradient");
    require_finite(g.bias, "gradient");
  }
  return grads;
}

LossAndGradient loss_and_gradient(const NetworkSpec& net, const ParamSet& params, const Tensor& x, const Targets& y) {
  Workspace ws;
  LossAndGradient out;
  out.loss = forward(net, params, x, y, ws);
  out.gradient = backward(net, params, y, ws);
  return out;
}

ParamSet scale_layers(const ParamSet& params, std::span<const double> factors) {
  if (factors.size() != params.size())
    throw ArgumentError("scale_layers: " + std::to_string(factors.size()) + " factors for " +
                        std::to_string(params.size()) + " layers");
  ParamSet out = params;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    if (!(factors[i] > 0.0)) throw ArgumentError("scale_layers: factor must be positive");
    for (double& w : out[i].weight.values()) w *= factors[i];
  }
  return out;
}

}  // namespace issnet
