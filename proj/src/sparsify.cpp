#include "issnet/sparsify.hpp"

#include <algorithm>
#include <cmath>

#include "issnet/errors.hpp"
#include "issnet/training.hpp"

namespace issnet {

namespace {

Grouping filter_grouping(const Shape& shape) { return grouping_for({PenaltyKind::group_lasso, 1.0}, shape); }

void require_layout(const ParamSet& params, const Mask& mask) {
  if (mask.layers.size() != params.size())
    throw DimensionError("mask covers " + std::to_string(mask.layers.size()) + " layers, params have " +
                         std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& bits = mask.layers[i];
    if (bits.empty()) continue;
    const Tensor& w = params[i].weight;
    const std::size_t want = mask.level == MaskLevel::weight   ? w.size()
                             : mask.level == MaskLevel::filter ? filter_grouping(w.shape()).groups
                                                               : 1;
    if (bits.size() != want)
      throw DimensionError(params[i].name + ": mask has " + std::to_string(bits.size()) + " bits, expected " +
                           std::to_string(want));
  }
}

bool maps_zero_to_zero(const LayerSpec& layer) {
  if (const auto* a = std::get_if<ActivationSpec>(&layer.kind))
    return a->fn == Activation::relu || a->fn == Activation::tanh;
  return std::holds_alternative<PoolSpec>(layer.kind) || std::holds_alternative<FlattenSpec>(layer.kind);
}

}  // namespace

double Mask::density(const ParamSet& params) const {
  require_layout(params, *this);
  std::size_t kept = 0, total = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& bits = layers[i];
    if (bits.empty()) continue;
    const std::size_t n = params[i].weight.size();
    total += n;
    const std::size_t per_bit = bits.size() ? n / bits.size() : 0;
    for (std::uint8_t b : bits) kept += b ? per_bit : 0;
  }
  return total ? static_cast<double>(kept) / static_cast<double>(total) : 0.0;
}

bool Mask::all_dropped() const {
  for (const auto& bits : layers)
    if (std::any_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; })) return false;
  return true;
}

std::vector<std::uint8_t> weight_keep(const Tensor& gamma) {
  std::vector<std::uint8_t> out(gamma.size());
  for (std::size_t i = 0; i < gamma.size(); ++i) out[i] = gamma[i] != 0.0;
  return out;
}

std::vector<std::uint8_t> filter_keep(const Tensor& gamma, const Grouping& grouping) {
  const std::vector<double> norms = group_norms(gamma, grouping);
  std::vector<std::uint8_t> out(norms.size());
  for (std::size_t g = 0; g < norms.size(); ++g) out[g] = norms[g] > 0.0;
  return out;
}

Mask weight_mask(const CoupledState& state) {
  Mask m{MaskLevel::weight, std::vector<std::vector<std::uint8_t>>(state.layers.size())};
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    if (state.penalized(i)) m.layers[i] = weight_keep(state.layers[i].gamma);
  return m;
}

Mask filter_mask(const CoupledState& state) {
  Mask m{MaskLevel::filter, std::vector<std::vector<std::uint8_t>>(state.layers.size())};
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    if (state.penalized(i))
      m.layers[i] = filter_keep(state.layers[i].gamma, filter_grouping(state.layers[i].gamma.shape()));
  return m;
}

Mask layer_mask(const CoupledState& state) {
  Mask m{MaskLevel::layer, std::vector<std::vector<std::uint8_t>>(state.layers.size())};
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    if (state.penalized(i)) m.layers[i] = {static_cast<std::uint8_t>(count_nonzero(state.layers[i].gamma) > 0)};
  return m;
}

Mask full_mask(const ParamSet& params, MaskLevel level) {
  Mask m{level, {}};
  for (const LayerParams& p : params.layers) {
    const std::size_t n = level == MaskLevel::weight   ? p.weight.size()
                          : level == MaskLevel::filter ? filter_grouping(p.weight.shape()).groups
                                                       : 1;
    m.layers.emplace_back(n, std::uint8_t{1});
  }
  return m;
}

void apply_mask_in_place(ParamSet& params, const Mask& mask) {
  require_layout(params, mask);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& bits = mask.layers[i];
    if (bits.empty()) continue;
    LayerParams& p = params[i];
    const std::size_t per_bit = p.weight.size() / bits.size();
    for (std::size_t b = 0; b < bits.size(); ++b) {
      if (bits[b]) continue;
      std::fill_n(p.weight.data() + b * per_bit, per_bit, 0.0);
      if (mask.level == MaskLevel::filter && p.has_bias) p.bias[b] = 0.0;
      if (mask.level == MaskLevel::layer) p.bias.fill(0.0);
    }
  }
}

ParamSet apply_mask(const ParamSet& params, const Mask& mask) {
  ParamSet out = params;
  apply_mask_in_place(out, mask);
  return out;
}

PruneReport prune_report(const NetworkSpec& net, const ParamSet& params) {
  validate_params(net, params);
  PruneReport report;
  std::size_t kept = 0, total = 0, next = 0;
  // Walk the layers to learn each parameterized layer's output size.
  auto visit = [&](auto&& self, const std::vector<LayerSpec>& layers, Shape shape) -> Shape {
    for (const LayerSpec& layer : layers) {
      const Shape out = output_shape(layer, shape);
      if (const auto* r = std::get_if<ResidualSpec>(&layer.kind)) {
        self(self, r->inner, shape);
      } else if (layer.parameterized()) {
        const LayerParams& p = params[next++];
        LayerPruneStats s;
        s.name = p.name;
        s.total = p.weight.size();
        s.kept = count_nonzero(p.weight);
        const std::size_t positions = p.conv ? out[1] * out[2] : 1;
        s.macs = s.kept * positions;
        kept += s.kept;
        total += s.total;
        report.macs += s.macs;
        report.layers.push_back(s);
      }
      shape = out;
    }
    return shape;
  };
  visit(visit, net.layers, net.input);
  report.sparsity = total ? static_cast<double>(kept) / static_cast<double>(total) : 0.0;
  return report;
}

PrunedNetwork prune_layers(const NetworkSpec& net, const CoupledState& state) {
  validate_params(net, state.params);
  const ParamSet masked = apply_mask(state.params, weight_mask(state));
  auto empty_support = [&](std::size_t i) { return state.penalized(i) && count_nonzero(state.layers[i].gamma) == 0; };

  PrunedNetwork out;
  out.net.input = net.input;
  out.net.loss = net.loss;
  std::size_t next = 0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& layer = net.layers[li];
    if (layer.parameterized()) {
      if (empty_support(next))
        throw StructuralError(state.params[next].name + " has empty support but is not inside a residual block");
      out.net.layers.push_back(layer);
      out.params.layers.push_back(masked[next++]);
      continue;
    }
    const auto* block = std::get_if<ResidualSpec>(&layer.kind);
    if (!block) {
      out.net.layers.push_back(layer);
      continue;
    }
    const std::size_t first = next;
    std::size_t penalized = 0, empty = 0;
    std::optional<std::size_t> last_param;  // position within inner
    for (std::size_t j = 0; j < block->inner.size(); ++j) {
      if (!block->inner[j].parameterized()) continue;
      last_param = j;
      if (state.penalized(next)) ++penalized;
      if (empty_support(next)) ++empty;
      ++next;
    }
    if (penalized == 0 || empty < penalized) {
      out.net.layers.push_back(layer);
      for (std::size_t p = first; p < next; ++p) out.params.layers.push_back(masked[p]);
      continue;
    }
    // Every penalized layer is empty: the block must contribute exactly zero.
    const LayerParams& tail = masked[next - 1];
    const std::string name = "L" + std::to_string(li);
    if (!state.penalized(next - 1) || count_nonzero(tail.weight) != 0 || count_nonzero(tail.bias) != 0)
      throw StructuralError("block " + name + " has empty support but " + tail.name + " still produces output");
    for (std::size_t j = *last_param + 1; j < block->inner.size(); ++j)
      if (!maps_zero_to_zero(block->inner[j]))
        throw StructuralError("block " + name + " has empty support but its layer " + std::to_string(j) +
                              " does not map zero to zero");
    out.removed.push_back(name);
  }
  // Re-derive names for the new topology.
  const std::vector<ParamSlot> slots = parameter_slots(out.net);
  for (std::size_t i = 0; i < slots.size(); ++i) out.params[i].name = slots[i].name;
  validate_params(out.net, out.params);
  return out;
}

Ticket extract_ticket(const CoupledState& state, std::size_t epoch, MaskLevel level) {
  Ticket t;
  t.epoch = epoch;
  t.mask = level == MaskLevel::weight ? weight_mask(state) : level == MaskLevel::filter ? filter_mask(state)
                                                                                         : layer_mask(state);
  t.snapshot = apply_mask(state.params, t.mask);
  t.degenerate = t.mask.all_dropped();
  return t;
}

ParamSet train_masked(const NetworkSpec& net, const ParamSet& init, const Mask& mask, const MaskedTraining& cfg,
                      const Dataset& data, SeededRng& rng,
                      const std::function<void(std::size_t, double, const ParamSet&)>& on_epoch) {
  ParamSet params = apply_mask(init, mask);
  ParamSet velocity = params.zeros_like();
  const ParamHook reapply = [&mask](ParamSet& p) { apply_mask_in_place(p, mask); };
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double loss = train_epoch_sgd(net, params, velocity, cfg.sgd, data, cfg.batch_size, rng, reapply);
    if (on_epoch) on_epoch(e, loss, params);
  }
  return params;
}

}  // namespace issnet
