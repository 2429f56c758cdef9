#include "issnet/grow.hpp"

#include <algorithm>
#include <cmath>

#include "issnet/errors.hpp"
#include "issnet/training.hpp"

namespace issnet {

namespace {

// Param index of every top-level layer (npos for layers without parameters).
constexpr std::size_t npos = static_cast<std::size_t>(-1);

std::vector<std::size_t> top_level_param_index(const NetworkSpec& net) {
  std::vector<std::size_t> out(net.layers.size(), npos);
  std::size_t next = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].parameterized()) {
      out[i] = next++;
    } else if (const auto* r = std::get_if<ResidualSpec>(&net.layers[i].kind)) {
      for (const LayerSpec& inner : r->inner)
        if (inner.parameterized()) ++next;
    }
  }
  return out;
}

// Top-level index of the layer consuming conv layer i's channels, or npos.
std::size_t consumer_of(const NetworkSpec& net, std::size_t i) {
  bool flattened = false;
  for (std::size_t j = i + 1; j < net.layers.size(); ++j) {
    const auto& kind = net.layers[j].kind;
    if (std::holds_alternative<ActivationSpec>(kind)) continue;
    if (std::holds_alternative<PoolSpec>(kind) && !flattened) continue;
    if (std::holds_alternative<FlattenSpec>(kind) && !flattened) {
      flattened = true;
      continue;
    }
    if (std::holds_alternative<ConvSpec>(kind) && !flattened) return j;
    if (std::holds_alternative<DenseSpec>(kind) && flattened) return j;
    return npos;
  }
  return npos;
}

std::size_t top_level_of(const NetworkSpec& net, std::size_t param_layer) {
  const auto index = top_level_param_index(net);
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index[i] == param_layer) return i;
  throw StructuralError("parameter layer " + std::to_string(param_layer) + " is not a top-level layer");
}

// Axis-0 extension: rows [old, new) drawn from `draw`.
template <typename Draw>
Tensor append_rows(const Tensor& t, std::size_t new_rows, Draw&& draw) {
  Shape shape = t.shape();
  shape[0] = new_rows;
  Tensor out(shape);
  std::copy_n(t.data(), t.size(), out.data());
  for (std::size_t i = t.size(); i < out.size(); ++i) out[i] = draw();
  return out;
}

// Each row holds `old_blocks` blocks of `inner` entries; blocks
// [old_blocks, new_blocks) are appended to every row.
template <typename Draw>
Tensor append_blocks(const Tensor& t, std::size_t old_blocks, std::size_t new_blocks, std::size_t inner,
                     Shape new_shape, Draw&& draw) {
  const std::size_t rows = t.extent(0);
  const std::size_t old_row = old_blocks * inner, new_row = new_blocks * inner;
  Tensor out(std::move(new_shape));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(t.data() + r * old_row, old_row, out.data() + r * new_row);
    for (std::size_t e = old_row; e < new_row; ++e) out[r * new_row + e] = draw();
  }
  return out;
}

}  // namespace

void GrowthPolicy::validate() const {
  if (period == 0) throw ArgumentError("growth period must be at least 1");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ArgumentError("growth threshold must lie in (0, 1]");
  if (rule == GrowthRule::fixed_increment && increment == 0) throw ArgumentError("growth increment must be positive");
  if (!(rate_factor > 0.0)) throw ArgumentError("post-growth rate factor must be positive");
  if (!(plateau_tolerance >= 0.0)) throw ArgumentError("plateau tolerance must be non-negative");
}

double layer_ratio(const CoupledState& state, std::size_t layer) {
  if (layer >= state.layers.size() || !state.penalized(layer))
    throw ArgumentError("layer " + std::to_string(layer) + " carries no penalty");
  const Grouping grouping = grouping_for(*state.layers[layer].penalty, state.layers[layer].gamma.shape());
  if (grouping.groups == 0) return 0.0;
  return static_cast<double>(active_groups(state.layers[layer].gamma, grouping)) /
         static_cast<double>(grouping.groups);
}

std::vector<std::size_t> growable_layers(const NetworkSpec& net) {
  const auto index = top_level_param_index(net);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (std::holds_alternative<ConvSpec>(net.layers[i].kind) && consumer_of(net, i) != npos) out.push_back(index[i]);
  return out;
}

std::size_t widen_layer(NetworkSpec& net, CoupledState& state, std::size_t layer, std::size_t new_width,
                        SeededRng& rng) {
  const std::size_t top = top_level_of(net, layer);
  auto* spec = std::get_if<ConvSpec>(&net.layers[top].kind);
  const std::size_t consumer_top = spec ? consumer_of(net, top) : npos;
  if (consumer_top == npos) throw StructuralError(state.params[layer].name + " cannot be widened");
  const std::size_t old_width = spec->out_channels;
  if (new_width <= old_width)
    throw ArgumentError("new width " + std::to_string(new_width) + " must exceed " + std::to_string(old_width));
  const std::size_t consumer = top_level_param_index(net)[consumer_top];
  auto zero = [] { return 0.0; };

  // Grown layer: new output filters.
  LayerParams& p = state.params[layer];
  CoupledLayer& c = state.layers[layer];
  const double sd = std::sqrt(2.0 / static_cast<double>(spec->in_channels * spec->kernel * spec->kernel));
  p.weight = append_rows(p.weight, new_width, [&] { return rng.normal(0.0, sd); });
  c.momentum = append_rows(c.momentum, new_width, zero);
  if (p.has_bias) {
    p.bias = append_rows(p.bias, new_width, zero);
    c.bias_momentum = append_rows(c.bias_momentum, new_width, zero);
  }
  if (c.penalty) {
    c.v = append_rows(c.v, new_width, zero);
    c.gamma = append_rows(c.gamma, new_width, zero);
    c.g = append_rows(c.g, new_width, zero);
  }
  spec->out_channels = new_width;

  // Consumer: matching input slices.
  LayerParams& q = state.params[consumer];
  CoupledLayer& cq = state.layers[consumer];
  std::size_t inner = 0;
  std::size_t fan_in = 0;
  Shape shape = q.weight.shape();
  if (auto* conv = std::get_if<ConvSpec>(&net.layers[consumer_top].kind)) {
    inner = conv->kernel * conv->kernel;
    conv->in_channels = new_width;
    shape[1] = new_width;
    fan_in = new_width * inner;
  } else {
    auto& dense = std::get<DenseSpec>(net.layers[consumer_top].kind);
    if (dense.in % old_width != 0) throw StructuralError(q.name + " input does not split into channels");
    inner = dense.in / old_width;
    dense.in = new_width * inner;
    shape[1] = dense.in;
    fan_in = dense.in;
  }
  const double sd_q = std::sqrt(2.0 / static_cast<double>(fan_in));
  q.weight = append_blocks(q.weight, old_width, new_width, inner, shape, [&] { return rng.normal(0.0, sd_q); });
  cq.momentum = append_blocks(cq.momentum, old_width, new_width, inner, shape, zero);
  if (cq.penalty) {
    cq.v = append_blocks(cq.v, old_width, new_width, inner, shape, zero);
    cq.gamma = append_blocks(cq.gamma, old_width, new_width, inner, shape, zero);
    cq.g = append_blocks(cq.g, old_width, new_width, inner, shape, zero);
  }
  validate_params(net, state.params);
  return consumer;
}

std::vector<GrowEvent> maybe_grow(NetworkSpec& net, CoupledState& state, const GrowthPolicy& policy,
                                  std::size_t epoch, SeededRng& rng) {
  policy.validate();
  if (epoch == 0 || epoch % policy.period != 0)
    throw ContractError("growth checks run only at positive multiples of the period " +
                        std::to_string(policy.period) + " (epoch " + std::to_string(epoch) + ")");
  struct Plan {
    std::size_t layer, old_width, new_width;
    bool capped;
  };
  std::vector<Plan> plans;
  for (std::size_t layer : growable_layers(net)) {
    if (!state.penalized(layer) || layer_ratio(state, layer) <= policy.threshold) continue;
    const std::size_t old_width = state.params[layer].weight.extent(0);
    const std::size_t wanted =
        policy.rule == GrowthRule::double_width ? 2 * std::max<std::size_t>(old_width, 1) : old_width + policy.increment;
    const std::size_t width = std::min(wanted, policy.max_width);
    if (width > old_width) plans.push_back({layer, old_width, width, wanted > policy.max_width});
  }
  std::vector<GrowEvent> events;
  for (const Plan& plan : plans) {
    widen_layer(net, state, plan.layer, plan.new_width, rng);
    events.push_back({epoch, state.params[plan.layer].name, plan.old_width, plan.new_width, plan.capped});
  }
  return events;
}

bool growth_plateaued(std::span<const double> losses, const GrowthPolicy& policy) {
  if (losses.size() <= policy.period) return false;
  const double now = losses.back();
  const double then = losses[losses.size() - 1 - policy.period];
  return std::abs(now - then) <= policy.plateau_tolerance * std::max(std::abs(then), 1e-300);
}

double finalize_alpha(const OptimizerConfig& cfg, const GrowthPolicy& policy, std::size_t epoch) {
  return policy.rate_factor * cfg.alpha.at(epoch);
}

void finalize(const NetworkSpec& net, CoupledState& state, const GrowthPolicy& policy, const OptimizerConfig& cfg,
              std::size_t start_epoch, const Dataset& data, std::size_t batch_size, SeededRng& rng,
              const std::function<void(std::size_t, double)>& on_epoch) {
  const double alpha = finalize_alpha(cfg, policy, start_epoch);
  for (std::size_t e = 0; e < policy.post_epochs; ++e) {
    const double loss = train_epoch(net, state, cfg, alpha, data, batch_size, rng);
    if (on_epoch) on_epoch(start_epoch + e + 1, loss);
  }
}

ParamSet zero_filters_from(const ParamSet& params, std::size_t layer, std::size_t from) {
  ParamSet out = params;
  LayerParams& p = out[layer];
  const std::size_t rows = p.weight.rank() ? p.weight.extent(0) : 0;
  if (from > rows) throw ArgumentError("filter index " + std::to_string(from) + " beyond " + std::to_string(rows));
  const std::size_t row = rows ? p.weight.size() / rows : 0;
  std::fill(p.weight.data() + from * row, p.weight.data() + p.weight.size(), 0.0);
  if (p.has_bias) std::fill(p.bias.data() + from, p.bias.data() + p.bias.size(), 0.0);
  return out;
}

}  // namespace issnet
