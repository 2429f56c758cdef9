#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "issnet/data.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/penalty.hpp"
#include "issnet/rng.hpp"

namespace issnet {

enum class MaskLevel { weight, filter, layer };

/// Keep bits per parameterized layer. Weight level: one bit per weight
/// entry; filter level: one per output filter (axis-0 slice); layer level: a
/// single bit. An empty bit vector leaves the layer untouched.
struct Mask {
  MaskLevel level = MaskLevel::weight;
  std::vector<std::vector<std::uint8_t>> layers;

  /// Kept weight entries over the weight entries of covered layers.
  double density(const ParamSet& params) const;
  bool all_dropped() const;
};

/// 1 where gamma is nonzero.
std::vector<std::uint8_t> weight_keep(const Tensor& gamma);
/// 1 for each group with nonzero l2 norm.
std::vector<std::uint8_t> filter_keep(const Tensor& gamma, const Grouping& grouping);

/// Masks from supp(Gamma) of the penalized layers; unpenalized layers are not covered.
Mask weight_mask(const CoupledState& state);
Mask filter_mask(const CoupledState& state);
Mask layer_mask(const CoupledState& state);

/// Keep-everything mask covering every layer.
Mask full_mask(const ParamSet& params, MaskLevel level = MaskLevel::weight);

/// Dropped entries become exactly 0; kept entries are copied bit for bit.
/// Filter- and layer-level masks also zero the biases of dropped filters.
ParamSet apply_mask(const ParamSet& params, const Mask& mask);
void apply_mask_in_place(ParamSet& params, const Mask& mask);

struct LayerPruneStats {
  std::string name;
  std::size_t kept = 0;  // nonzero weights
  std::size_t total = 0;
  std::size_t macs = 0;  // multiply-adds per sample over nonzero weights
};

struct PruneReport {
  std::vector<LayerPruneStats> layers;
  double sparsity = 0.0;  // nonzero weights over all weights
  std::size_t macs = 0;
};

PruneReport prune_report(const NetworkSpec& net, const ParamSet& params);

struct PrunedNetwork {
  NetworkSpec net;
  ParamSet params;
  std::vector<std::string> removed;  // names of the removed residual blocks ("L<i>")
};

/// Removes residual blocks whose penalized layers all have empty Gamma
/// support; the rest of the parameters are copied under the weight-level mask.
/// StructuralError when an empty-support layer is not inside such a block, or
/// when a removable block would not contribute exactly zero (nonzero bias
/// after the last layer, or a trailing activation with f(0) != 0).
PrunedNetwork prune_layers(const NetworkSpec& net, const CoupledState& state);

struct Ticket {
  std::size_t epoch = 0;
  Mask mask;
  ParamSet snapshot;  // W at `epoch`, masked
  bool degenerate = false;  // nothing selected
};

Ticket extract_ticket(const CoupledState& state, std::size_t epoch, MaskLevel level = MaskLevel::weight);

struct MaskedTraining {
  SgdConfig sgd;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
};

/// Momentum SGD from `init` with the mask re-applied after every step.
/// `on_epoch` receives the 1-based epoch, training loss and current params.
ParamSet train_masked(const NetworkSpec& net, const ParamSet& init, const Mask& mask, const MaskedTraining& cfg,
                      const Dataset& data, SeededRng& rng,
                      const std::function<void(std::size_t, double, const ParamSet&)>& on_epoch = {});

}  // namespace issnet
