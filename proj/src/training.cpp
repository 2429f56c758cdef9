#include "issnet/training.hpp"

#include <algorithm>
#include <numeric>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

constexpr std::size_t kEvalChunk = 512;

template <typename Step>
double run_batches(const Dataset& data, std::size_t batch_size, SeededRng& rng, Step&& step) {
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  const std::vector<std::size_t> order = epoch_order(data.size(), rng);
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, order.size() - start);
    const Dataset batch = data.select(std::span<const std::size_t>(order.data() + start, len));
    total += step(batch) * static_cast<double>(len);
  }
  return order.empty() ? 0.0 : total / static_cast<double>(order.size());
}

}  // namespace

std::vector<std::size_t> epoch_order(std::size_t n, SeededRng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

double train_epoch(const NetworkSpec& net, CoupledState& state, const OptimizerConfig& cfg, double alpha,
                   const Dataset& data, std::size_t batch_size, SeededRng& rng, const StateHook& after_step) {
  return run_batches(data, batch_size, rng, [&](const Dataset& batch) {
    LossAndGradient lg = loss_and_gradient(net, state.params, batch.x, batch.y);
    optimizer_step(state, lg.gradient, cfg, alpha);
    if (after_step) after_step(state);
    return lg.loss;
  });
}

double train_epoch_sgd(const NetworkSpec& net, ParamSet& params, ParamSet& velocity, const SgdConfig& cfg,
                       const Dataset& data, std::size_t batch_size, SeededRng& rng, const ParamHook& after_step) {
  return run_batches(data, batch_size, rng, [&](const Dataset& batch) {
    LossAndGradient lg = loss_and_gradient(net, params, batch.x, batch.y);
    sgd_step(params, lg.gradient, velocity, cfg);
    if (after_step) after_step(params);
    return lg.loss;
  });
}

double dataset_loss(const NetworkSpec& net, const ParamSet& params, const Dataset& data) {
  double total = 0.0;
  Workspace ws;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    std::vector<std::size_t> rows(std::min(kEvalChunk, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const Dataset chunk = data.select(rows);
    total += forward(net, params, chunk.x, chunk.y, ws) * static_cast<double>(rows.size());
  }
  return data.size() ? total / static_cast<double>(data.size()) : 0.0;
}

double evaluate(const NetworkSpec& net, const ParamSet& params, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  if (net.loss == LossKind::mse) return 2.0 * dataset_loss(net, params, data) / static_cast<double>(
                                                 shape_size(output_shape(net)));
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    std::vector<std::size_t> rows(std::min(kEvalChunk, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const Dataset chunk = data.select(rows);
    const Tensor out = predict(net, params, chunk.x);
    const std::size_t k = out.size() / rows.size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* row = out.data() + r * k;
      const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      if (best == chunk.y.classes[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace issnet
