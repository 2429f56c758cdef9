#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "issnet/network.hpp"
#include "issnet/penalty.hpp"
#include "issnet/tensor.hpp"

namespace issnet {

enum class Variant { naive, momentum, momentum_weight_decay, magnitude_scaled };

/// Step-decay learning-rate schedule, evaluated at epoch boundaries.
struct AlphaSchedule {
  double initial = 0.1;
  double factor = 0.1;
  std::size_t every = 30;  // 0 disables decay

  double at(std::size_t epoch) const;
};

struct OptimizerConfig {
  double kappa = 1.0;
  double nu = 10.0;
  AlphaSchedule alpha;
  Variant variant = Variant::naive;
  double momentum = 0.9;      // tau for the momentum variants
  double weight_decay = 0.0;  // beta in W <- W - kappa alpha v - beta W
  double beta_floor = 0.01;   // lower bound of the magnitude-scaling factor

  /// Throws ArgumentError when kappa, nu or alpha are not positive, or the
  /// momentum / decay / floor values are out of range.
  void validate() const;
};

/// Per-layer companion state. Layers without a penalty carry no V / Gamma / g
/// and are trained by the plain gradient part of the chosen variant.
struct CoupledLayer {
  std::optional<PenaltySpec> penalty;
  Tensor v;
  Tensor gamma;
  Tensor g;  // subgradient of the penalty at gamma: v - gamma / kappa
  Tensor momentum;
  Tensor bias_momentum;
};

struct CoupledState {
  ParamSet params;  // W and biases
  std::vector<CoupledLayer> layers;
  std::size_t step = 0;

  /// V = Gamma = g = 0 and zero momentum; `penalties` has one entry per layer.
  static CoupledState init(ParamSet params, std::span<const std::optional<PenaltySpec>> penalties);

  bool penalized(std::size_t layer) const { return layers[layer].penalty.has_value(); }
  /// Gammas of every layer (empty tensors for unpenalized layers).
  std::vector<Tensor> gammas() const;
};

/// Dense layers get elementwise lasso, conv layers per-filter group lasso, both at `lambda`.
std::vector<std::optional<PenaltySpec>> default_penalties(const ParamSet& params, double lambda = 1.0);

/// L(W) + sum over penalized layers of |W - Gamma|^2 / (2 nu).
double augmented_loss(double loss, const CoupledState& state, double nu);

/// Plain update (Euler step of the coupled inclusion):
///   W <- W - kappa alpha (dL/dW + (W - Gamma) / nu)
///   V <- V - alpha (Gamma - W) / nu
///   Gamma <- kappa prox(V)
void dessilbi_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha);

/// Momentum on the W update (v <- tau v + dLbar/dW; W <- W - kappa alpha v - beta W),
/// V and Gamma as in dessilbi_step. Weight decay only for momentum_weight_decay.
void dessilbi_step_momentum(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha);

/// Per-group magnitude scaling of the V / Gamma updates.
struct ScalingFactors {
  std::vector<double> beta;     // per group
  std::vector<double> epsilon;  // per group: |W_j|_* (abs for elements, l2 for filters)
};
ScalingFactors scaling_factors(const Tensor& w, const Tensor& gamma, const PenaltySpec& spec, double beta_floor);

/// W as the momentum variants (momentum 0 gives the plain update);
///   V <- V - alpha beta (.) dLbar/dGamma,  Gamma <- kappa eps (.) prox(V).
void dessilbi_step_scaled(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha);

/// Subgradient form of the plain update, driven by g instead of V:
///   Gamma <- Prox_{kappa Omega}(Gamma + kappa (g - alpha dLbar/dGamma))
///   g <- g - (Gamma_new - Gamma_old + kappa alpha dLbar/dGamma) / kappa
/// V is refreshed as g + Gamma / kappa afterwards but never read.
void lbi_reformulated_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha);

/// Dispatches on cfg.variant.
void optimizer_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha);

/// Mirror descent with the elastic-net mirror: z <- z - alpha grad; w <- kappa prox(z).
std::pair<Tensor, Tensor> mda_step(const Tensor& z, const Tensor& grad, double alpha, double kappa,
                                   const PenaltySpec& spec);

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// v <- mu v + g; W <- W - lr v - wd W (biases included).
void sgd_step(ParamSet& params, const ParamSet& grads, ParamSet& velocity, const SgdConfig& cfg);

/// Largest admissible step 2 / (kappa (lip + 1 / nu)).
double max_step_size(double kappa, double nu, double lip);

}  // namespace issnet
