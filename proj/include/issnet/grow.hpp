#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "issnet/data.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/rng.hpp"

namespace issnet {

enum class GrowthRule { double_width, fixed_increment };

struct GrowthPolicy {
  std::size_t period = 10;       // J: epochs between checks
  double threshold = 0.8;        // tau: grow when the selected fraction exceeds it
  GrowthRule rule = GrowthRule::double_width;
  std::size_t increment = 4;     // filters added by fixed_increment
  std::size_t max_width = 64;
  std::size_t post_epochs = 30;  // extra training once growth stops
  double rate_factor = 0.1;      // alpha multiplier for the post-growth phase
  double plateau_tolerance = 1e-3;  // relative loss change over J epochs that ends growth

  void validate() const;
};

struct GrowEvent {
  std::size_t epoch = 0;
  std::string layer;
  std::size_t old_width = 0;
  std::size_t new_width = 0;
  bool capped = false;  // the rule asked for more than max_width allowed
};

/// Active Gamma groups over all groups of the layer (a dense W has full
/// support, so the denominator is the group count). ArgumentError for layers
/// without a penalty.
double layer_ratio(const CoupledState& state, std::size_t layer);

/// Indices (into the ParamSet) of conv layers that maybe_grow can widen: top
/// level, followed by a conv layer or by flatten + dense, with only
/// activations / pooling in between.
std::vector<std::size_t> growable_layers(const NetworkSpec& net);

/// Widens `layer` to `new_width` output filters. New filters are He-normal
/// with zero bias; V, Gamma, g and momentum get zero rows; the consumer layer
/// gains matching He-normal input slices (zero V / Gamma). Existing values are
/// preserved bitwise. Returns the index of the consumer layer.
std::size_t widen_layer(NetworkSpec& net, CoupledState& state, std::size_t layer, std::size_t new_width,
                        SeededRng& rng);

/// Every growable layer whose ratio exceeds the threshold is widened by the
/// policy's rule (capped at max_width). `epoch` must be a positive multiple of
/// the period (ContractError otherwise).
std::vector<GrowEvent> maybe_grow(NetworkSpec& net, CoupledState& state, const GrowthPolicy& policy,
                                  std::size_t epoch, SeededRng& rng);

/// True when the relative change of the epoch loss over the last `period`
/// epochs is below the plateau tolerance. `losses[e]` is the loss of epoch e + 1.
bool growth_plateaued(std::span<const double> losses, const GrowthPolicy& policy);

/// The constant rate of the post-growth phase: rate_factor * alpha(epoch).
double finalize_alpha(const OptimizerConfig& cfg, const GrowthPolicy& policy, std::size_t epoch);

/// Trains `post_epochs` further epochs at finalize_alpha(start_epoch) without
/// growth. `on_epoch` receives the 1-based epoch index and the training loss.
void finalize(const NetworkSpec& net, CoupledState& state, const GrowthPolicy& policy, const OptimizerConfig& cfg,
              std::size_t start_epoch, const Dataset& data, std::size_t batch_size, SeededRng& rng,
              const std::function<void(std::size_t, double)>& on_epoch = {});

/// Zeroes the weights (and biases) of output filters [from, end) of `layer`.
ParamSet zero_filters_from(const ParamSet& params, std::size_t layer, std::size_t from);

}  // namespace issnet
