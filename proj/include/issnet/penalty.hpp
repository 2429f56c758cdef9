#pragma once

#include <cstddef>
#include <vector>

#include "issnet/tensor.hpp"

namespace issnet {

enum class PenaltyKind { lasso, group_lasso };

/// lambda * sum over groups of the group l2 norm.
///
/// Grouping is derived from the tensor shape: lasso uses one group per
/// element; group lasso uses one group per slice along axis 0 (one group per
/// output filter for conv weights c_out x c_in x k x k, one per output
/// neuron for dense weights), or a single group for a rank-1 tensor.
struct PenaltySpec {
  PenaltyKind kind = PenaltyKind::lasso;
  double lambda = 1.0;
};

/// Contiguous, equal-size groups partitioning a row-major tensor.
struct Grouping {
  std::size_t groups = 0;
  std::size_t group_size = 1;
};

Grouping grouping_for(const PenaltySpec& spec, const Shape& shape);

/// l2 norm of each group, in group order.
std::vector<double> group_norms(const Tensor& t, const Grouping& grouping);

/// Number of groups with at least one nonzero entry.
std::size_t active_groups(const Tensor& t, const Grouping& grouping);

double omega_value(const Tensor& gamma, const PenaltySpec& spec);

/// argmin_G 0.5 |G - v|^2 + Omega(G): per group max(0, 1 - lambda / |v_g|) v_g.
/// Groups whose norm is within 1e-12 of lambda are returned as exact zeros.
Tensor prox(const Tensor& v, const PenaltySpec& spec);

/// g = v - gamma / kappa, the element of the penalty subdifferential at gamma
/// implied by gamma = kappa * prox(v). Throws ContractError when gamma is not
/// kappa * prox(v) to within 1e-8.
Tensor recover_subgradient(const Tensor& v, const Tensor& gamma, double kappa, const PenaltySpec& spec);

/// Omega(gamma) - Omega(gamma_ref) - <g_ref, gamma - gamma_ref>.
/// g_ref must be a subgradient at gamma_ref: every group norm at most
/// lambda + 1e-10 and <g_ref, gamma_ref> = Omega(gamma_ref); ContractError otherwise.
double bregman(const Tensor& gamma, const Tensor& gamma_ref, const Tensor& g_ref, const PenaltySpec& spec);

}  // namespace issnet
