#pragma once

#include <cstddef>
#include <functional>

#include "issnet/data.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/rng.hpp"

namespace issnet {

/// Called after every optimizer step (e.g. to re-apply a mask).
using StateHook = std::function<void(CoupledState&)>;
using ParamHook = std::function<void(ParamSet&)>;

/// Row order for one epoch: a fresh permutation drawn from `rng`.
std::vector<std::size_t> epoch_order(std::size_t n, SeededRng& rng);

/// One pass over `data` in shuffled mini-batches (the last batch may be
/// smaller). Returns the sample-weighted mean of the batch losses.
double train_epoch(const NetworkSpec& net, CoupledState& state, const OptimizerConfig& cfg, double alpha,
                   const Dataset& data, std::size_t batch_size, SeededRng& rng, const StateHook& after_step = {});

double train_epoch_sgd(const NetworkSpec& net, ParamSet& params, ParamSet& velocity, const SgdConfig& cfg,
                       const Dataset& data, std::size_t batch_size, SeededRng& rng, const ParamHook& after_step = {});

/// Mean loss over the whole dataset, evaluated in chunks.
double dataset_loss(const NetworkSpec& net, const ParamSet& params, const Dataset& data);

/// Top-1 accuracy in [0, 1] for classification, mean squared error for regression.
double evaluate(const NetworkSpec& net, const ParamSet& params, const Dataset& data);

}  // namespace issnet
