#include "issnet/penalty.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr double kConsistencyTolerance = 1e-8;
constexpr double kDualBallSlack = 1e-10;

void check_lambda(const PenaltySpec& spec) {
  if (!(spec.lambda >= 0.0) || !std::isfinite(spec.lambda))
    throw ArgumentError("penalty lambda must be a finite non-negative number");
}

double group_norm(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

}  // namespace

Grouping grouping_for(const PenaltySpec& spec, const Shape& shape) {
  const std::size_t n = shape_size(shape);
  if (spec.kind == PenaltyKind::lasso || shape.empty()) return {n, 1};
  if (shape.size() == 1) return {n ? std::size_t{1} : std::size_t{0}, n};
  const std::size_t groups = shape[0];
  return {groups, groups ? n / groups : 0};
}

std::vector<double> group_norms(const Tensor& t, const Grouping& grouping) {
  if (grouping.groups * grouping.group_size != t.size())
    throw DimensionError("grouping covers " + std::to_string(grouping.groups * grouping.group_size) +
                         " entries, tensor has " + std::to_string(t.size()));
  std::vector<double> norms(grouping.groups);
  for (std::size_t g = 0; g < grouping.groups; ++g)
    norms[g] = group_norm(t.data() + g * grouping.group_size, grouping.group_size);
  return norms;
}

std::size_t active_groups(const Tensor& t, const Grouping& grouping) {
  const auto norms = group_norms(t, grouping);
  return static_cast<std::size_t>(std::count_if(norms.begin(), norms.end(), [](double n) { return n > 0.0; }));
}

double omega_value(const Tensor& gamma, const PenaltySpec& spec) {
  check_lambda(spec);
  double s = 0.0;
  for (double n : group_norms(gamma, grouping_for(spec, gamma.shape()))) s += n;
  return spec.lambda * s;
}

Tensor prox(const Tensor& v, const PenaltySpec& spec) {
  check_lambda(spec);
  const Grouping grouping = grouping_for(spec, v.shape());
  Tensor out(v.shape());
  for (std::size_t g = 0; g < grouping.groups; ++g) {
    const double* src = v.data() + g * grouping.group_size;
    double* dst = out.data() + g * grouping.group_size;
    const double n = group_norm(src, grouping.group_size);
    if (n <= spec.lambda + kTieTolerance) continue;
    const double shrink = 1.0 - spec.lambda / n;
    for (std::size_t i = 0; i < grouping.group_size; ++i) dst[i] = shrink * src[i];
  }
  return out;
}

Tensor recover_subgradient(const Tensor& v, const Tensor& gamma, double kappa, const PenaltySpec& spec) {
  if (!(kappa > 0.0)) throw ArgumentError("recover_subgradient: kappa must be positive");
  require_same_shape(v, gamma, "recover_subgradient");
  const Tensor expected = kappa * prox(v, spec);
  const double scale = 1.0 + max_abs(gamma);
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    if (std::abs(expected[i] - gamma[i]) > kConsistencyTolerance * scale)
      throw ContractError("recover_subgradient: gamma is not kappa * prox(v) at entry " + std::to_string(i));
  }
  Tensor g = v;
  axpy(-1.0 / kappa, gamma, g);
  return g;
}

double bregman(const Tensor& gamma, const Tensor& gamma_ref, const Tensor& g_ref, const PenaltySpec& spec) {
  require_same_shape(gamma, gamma_ref, "bregman");
  require_same_shape(gamma, g_ref, "bregman");
  check_lambda(spec);
  const Grouping grouping = grouping_for(spec, gamma.shape());
  for (double n : group_norms(g_ref, grouping)) {
    if (n > spec.lambda + kDualBallSlack)
      throw ContractError("bregman: reference subgradient group norm " + std::to_string(n) + " exceeds lambda " +
                          std::to_string(spec.lambda));
  }
  const double omega_ref = omega_value(gamma_ref, spec);
  const double pairing_ref = dot(g_ref, gamma_ref);
  if (std::abs(omega_ref - pairing_ref) > kConsistencyTolerance * (1.0 + omega_ref))
    throw ContractError("bregman: reference subgradient is not in the subdifferential at the reference point");
  return omega_value(gamma, spec) - omega_ref - (dot(g_ref, gamma) - pairing_ref);
}

}  // namespace issnet
