#include "issnet/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

void check_grads(const CoupledState& state, const ParamSet& grads) {
  if (grads.size() != state.params.size())
    throw DimensionError("gradient holds " + std::to_string(grads.size()) + " layers, state holds " +
                         std::to_string(state.params.size()));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(grads[i].weight, state.params[i].weight, state.params[i].name + " weight gradient");
    require_same_shape(grads[i].bias, state.params[i].bias, state.params[i].name + " bias gradient");
  }
}

// dLbar/dW = dL/dW + (W - Gamma) / nu for penalized layers.
Tensor coupled_weight_gradient(const Tensor& w, const Tensor& gamma, const Tensor& grad, double nu) {
  Tensor out = grad;
  const double inv_nu = 1.0 / nu;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += (w[i] - gamma[i]) * inv_nu;
  return out;
}

// dLbar/dGamma = (Gamma - W) / nu.
Tensor coupled_gamma_gradient(const Tensor& w, const Tensor& gamma, double nu) {
  Tensor out(gamma.shape());
  const double inv_nu = 1.0 / nu;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gamma[i] - w[i]) * inv_nu;
  return out;
}

struct WeightRule {
  double rate;         // kappa * alpha
  double momentum;     // 0 for the plain rule
  double decay;        // beta
  bool use_momentum;
};

WeightRule weight_rule(const OptimizerConfig& cfg, double alpha) {
  switch (cfg.variant) {
    case Variant::naive:
      return {cfg.kappa * alpha, 0.0, 0.0, false};
    case Variant::momentum:
      return {cfg.kappa * alpha, cfg.momentum, 0.0, true};
    case Variant::momentum_weight_decay:
    case Variant::magnitude_scaled:
      return {cfg.kappa * alpha, cfg.momentum, cfg.weight_decay, true};
  }
  return {cfg.kappa * alpha, 0.0, 0.0, false};
}

void apply_weight_rule(Tensor& w, const Tensor& grad, Tensor& buffer, const WeightRule& rule) {
  if (!rule.use_momentum) {
    axpy(-rule.rate, grad, w);
    return;
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    buffer[i] = rule.momentum * buffer[i] + grad[i];
    const double w0 = w[i];
    double next = w0 - rule.rate * buffer[i];
    if (rule.decay != 0.0) next -= rule.decay * w0;
    w[i] = next;
  }
}

// W and bias updates shared by every variant. Returns dLbar/dGamma per penalized
// layer, evaluated at the pre-update (W_k, Gamma_k).
std::vector<Tensor> update_weights(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg,
                                   double alpha) {
  check_grads(state, grads);
  const WeightRule rule = weight_rule(cfg, alpha);
  std::vector<Tensor> gamma_grads(state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    LayerParams& p = state.params[i];
    CoupledLayer& c = state.layers[i];
    if (c.penalty) {
      gamma_grads[i] = coupled_gamma_gradient(p.weight, c.gamma, cfg.nu);
      apply_weight_rule(p.weight, coupled_weight_gradient(p.weight, c.gamma, grads[i].weight, cfg.nu), c.momentum,
                        rule);
    } else {
      apply_weight_rule(p.weight, grads[i].weight, c.momentum, rule);
    }
    if (p.has_bias) apply_weight_rule(p.bias, grads[i].bias, c.bias_momentum, rule);
    require_finite(p.weight, p.name + " weight update");
    require_finite(p.bias, p.name + " bias update");
  }
  return gamma_grads;
}

// V <- V - alpha dLbar/dGamma; Gamma <- kappa prox(V); g <- V - Gamma / kappa.
void update_companions(CoupledState& state, const std::vector<Tensor>& gamma_grads, const OptimizerConfig& cfg,
                       double alpha) {
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    CoupledLayer& c = state.layers[i];
    if (!c.penalty) continue;
    axpy(-alpha, gamma_grads[i], c.v);
    require_finite(c.v, state.params[i].name + " V update");
    c.gamma = cfg.kappa * prox(c.v, *c.penalty);
    c.g = c.v;
    axpy(-1.0 / cfg.kappa, c.gamma, c.g);
  }
}

}  // namespace

double AlphaSchedule::at(std::size_t epoch) const {
  if (every == 0) return initial;
  return initial * std::pow(factor, static_cast<double>(epoch / every));
}

void OptimizerConfig::validate() const {
  if (!(kappa > 0.0)) throw ArgumentError("kappa must be positive");
  if (!(nu > 0.0)) throw ArgumentError("nu must be positive");
  if (!(alpha.initial > 0.0) || !(alpha.factor > 0.0)) throw ArgumentError("alpha schedule must stay positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ArgumentError("weight decay must be non-negative");
  if (!(beta_floor > 0.0)) throw ArgumentError("beta floor must be positive");
}

CoupledState CoupledState::init(ParamSet params, std::span<const std::optional<PenaltySpec>> penalties) {
  if (penalties.size() != params.size())
    throw DimensionError("need one penalty entry per layer (" + std::to_string(params.size()) + "), got " +
                         std::to_string(penalties.size()));
  CoupledState state;
  state.layers.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CoupledLayer& c = state.layers[i];
    c.penalty = penalties[i];
    c.momentum = Tensor::zeros_like(params[i].weight);
    c.bias_momentum = Tensor::zeros_like(params[i].bias);
    if (c.penalty) {
      c.v = Tensor::zeros_like(params[i].weight);
      c.gamma = Tensor::zeros_like(params[i].weight);
      c.g = Tensor::zeros_like(params[i].weight);
    }
  }
  state.params = std::move(params);
  return state;
}

std::vector<Tensor> CoupledState::gammas() const {
  std::vector<Tensor> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l.gamma);
  return out;
}

std::vector<std::optional<PenaltySpec>> default_penalties(const ParamSet& params, double lambda) {
  std::vector<std::optional<PenaltySpec>> out;
  for (const auto& l : params.layers)
    out.emplace_back(PenaltySpec{l.conv ? PenaltyKind::group_lasso : PenaltyKind::lasso, lambda});
  return out;
}

double augmented_loss(double loss, const CoupledState& state, double nu) {
  double coupling = 0.0;
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    if (state.penalized(i)) coupling += squared_norm(state.params[i].weight - state.layers[i].gamma);
  return loss + coupling / (2.0 * nu);
}

void dessilbi_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha) {
  if (cfg.variant != Variant::naive) throw ArgumentError("dessilbi_step requires the naive variant");
  auto gamma_grads = update_weights(state, grads, cfg, alpha);
  update_companions(state, gamma_grads, cfg, alpha);
  ++state.step;
}

void dessilbi_step_momentum(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha) {
  if (cfg.variant != Variant::momentum && cfg.variant != Variant::momentum_weight_decay)
    throw ArgumentError("dessilbi_step_momentum requires a momentum variant");
  auto gamma_grads = update_weights(state, grads, cfg, alpha);
  update_companions(state, gamma_grads, cfg, alpha);
  ++state.step;
}

ScalingFactors scaling_factors(const Tensor& w, const Tensor& gamma, const PenaltySpec& spec, double beta_floor) {
  require_same_shape(w, gamma, "scaling_factors");
  const Grouping grouping = grouping_for(spec, w.shape());
  ScalingFactors f;
  f.epsilon = group_norms(w, grouping);
  const double ratio = grouping.groups
                           ? static_cast<double>(active_groups(gamma, grouping)) / static_cast<double>(grouping.groups)
                           : 0.0;
  f.beta.resize(grouping.groups);
  for (std::size_t j = 0; j < grouping.groups; ++j) {
    const double inv = f.epsilon[j] > 0.0 ? 1.0 / f.epsilon[j] : std::numeric_limits<double>::infinity();
    f.beta[j] = std::max(beta_floor, std::min(1.0, inv) * (1.0 - ratio));
  }
  return f;
}

void dessilbi_step_scaled(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha) {
  if (cfg.variant != Variant::magnitude_scaled) throw ArgumentError("dessilbi_step_scaled requires magnitude_scaled");
  // Factors use W_k and Gamma_k, before either moves.
  std::vector<ScalingFactors> factors(state.layers.size());
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    if (state.penalized(i))
      factors[i] = scaling_factors(state.params[i].weight, state.layers[i].gamma, *state.layers[i].penalty,
                                   cfg.beta_floor);

  auto gamma_grads = update_weights(state, grads, cfg, alpha);

  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    CoupledLayer& c = state.layers[i];
    if (!c.penalty) continue;
    const Grouping grouping = grouping_for(*c.penalty, c.v.shape());
    const ScalingFactors& f = factors[i];
    for (std::size_t j = 0; j < grouping.groups; ++j)
      for (std::size_t e = j * grouping.group_size; e < (j + 1) * grouping.group_size; ++e)
        c.v[e] -= alpha * f.beta[j] * gamma_grads[i][e];
    require_finite(c.v, state.params[i].name + " V update");
    Tensor shrunk = prox(c.v, *c.penalty);
    for (std::size_t j = 0; j < grouping.groups; ++j)
      for (std::size_t e = j * grouping.group_size; e < (j + 1) * grouping.group_size; ++e)
        shrunk[e] *= cfg.kappa * f.epsilon[j];
    c.gamma = std::move(shrunk);
    c.g = c.v;
    axpy(-1.0 / cfg.kappa, c.gamma, c.g);
  }
  ++state.step;
}

void lbi_reformulated_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha) {
  if (cfg.variant != Variant::naive) throw ArgumentError("lbi_reformulated_step requires the naive variant");
  auto gamma_grads = update_weights(state, grads, cfg, alpha);
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    CoupledLayer& c = state.layers[i];
    if (!c.penalty) continue;
    const PenaltySpec scaled{c.penalty->kind, c.penalty->lambda * cfg.kappa};
    Tensor arg = c.gamma;
    for (std::size_t e = 0; e < arg.size(); ++e) arg[e] += cfg.kappa * (c.g[e] - alpha * gamma_grads[i][e]);
    Tensor next = prox(arg, scaled);
    for (std::size_t e = 0; e < next.size(); ++e)
      c.g[e] -= (next[e] - c.gamma[e] + cfg.kappa * alpha * gamma_grads[i][e]) / cfg.kappa;
    c.gamma = std::move(next);
    require_finite(c.g, state.params[i].name + " subgradient update");
    c.v = c.g;
    axpy(1.0 / cfg.kappa, c.gamma, c.v);
  }
  ++state.step;
}

void optimizer_step(CoupledState& state, const ParamSet& grads, const OptimizerConfig& cfg, double alpha) {
  switch (cfg.variant) {
    case Variant::naive:
      dessilbi_step(state, grads, cfg, alpha);
      return;
    case Variant::momentum:
    case Variant::momentum_weight_decay:
      dessilbi_step_momentum(state, grads, cfg, alpha);
      return;
    case Variant::magnitude_scaled:
      dessilbi_step_scaled(state, grads, cfg, alpha);
      return;
  }
}

std::pair<Tensor, Tensor> mda_step(const Tensor& z, const Tensor& grad, double alpha, double kappa,
                                   const PenaltySpec& spec) {
  if (!(kappa > 0.0)) throw ArgumentError("mda_step: kappa must be positive");
  if (!(alpha >= 0.0)) throw ArgumentError("mda_step: alpha must be non-negative");
  require_same_shape(z, grad, "mda_step");
  Tensor z_next = z;
  axpy(-alpha, grad, z_next);
  require_finite(z_next, "mda_step");
  Tensor w_next = kappa * prox(z_next, spec);
  return {std::move(z_next), std::move(w_next)};
}

void sgd_step(ParamSet& params, const ParamSet& grads, ParamSet& velocity, const SgdConfig& cfg) {
  if (grads.size() != params.size() || velocity.size() != params.size())
    throw DimensionError("sgd_step: params, grads and velocity disagree in layer count");
  const WeightRule rule{cfg.lr, cfg.momentum, cfg.weight_decay, true};
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(grads[i].weight, params[i].weight, "sgd_step weight");
    require_same_shape(grads[i].bias, params[i].bias, "sgd_step bias");
    apply_weight_rule(params[i].weight, grads[i].weight, velocity[i].weight, rule);
    apply_weight_rule(params[i].bias, grads[i].bias, velocity[i].bias, rule);
    require_finite(params[i].weight, "sgd_step");
  }
}

double max_step_size(double kappa, double nu, double lip) {
  if (!(kappa > 0.0) || !(nu > 0.0) || !(lip > 0.0))
    throw ArgumentError("max_step_size: kappa, nu and lip must be positive");
  return 2.0 / (kappa * (lip + 1.0 / nu));
}

}  // namespace issnet
