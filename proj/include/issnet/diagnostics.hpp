#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "issnet/grow.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/penalty.hpp"
#include "issnet/rng.hpp"

namespace issnet {

/// P_k = (W_k, Gamma_k) with the subgradient g_k and the empirical loss and
/// its gradient at W_k.
struct Iterate {
  ParamSet w;
  std::vector<Tensor> gamma;  // empty tensors for unpenalized layers
  std::vector<Tensor> g;
  double loss = 0.0;
  ParamSet grad;

  static Iterate capture(const CoupledState& state, double loss, ParamSet grad);
};

struct LyapunovSample {
  std::size_t k = 0;
  double F = 0.0;
  double loss_bar = 0.0;
  double bregman_term = 0.0;
  double p_step_norm_sq = 0.0;  // |P_{k+1} - P_k|^2, filled once P_{k+1} is known
};

/// F(Q_k) = alpha Lbar(P_k) + sum over penalized layers of B^{g_{k-1}}(Gamma_k, Gamma_{k-1}).
/// Throws ContractError when g_{k-1} is not a subgradient at Gamma_{k-1}.
LyapunovSample lyapunov(const Iterate& current, const Iterate& previous,
                        std::span<const std::optional<PenaltySpec>> penalties, double alpha, double nu);

/// rho = 1/kappa - alpha (lip + 1/nu) / 2
double descent_rho(double kappa, double nu, double lip, double alpha);
/// rho1 = 2/kappa + 1 + alpha (lip + 2/nu)
double relative_error_rho1(double kappa, double nu, double lip, double alpha);

struct DescentReport {
  double max_violation = 0.0;  // max of F_{k+1} - F_k + rho |dP|^2 (<= 0 when descending)
  std::optional<std::size_t> first_violation;
  std::size_t violations = 0;
  bool passed() const { return violations == 0; }
};

/// Checks F_{k+1} <= F_k - rho |P_{k+1} - P_k|^2 with 1e-10 absolute slack.
DescentReport check_sufficient_descent(std::span<const LyapunovSample> trace, double rho);

struct RelativeErrorSample {
  std::size_t k = 0;  // index of the new iterate (k + 1 in H_{k+1})
  double h_norm = 0.0;
  double dq_norm = 0.0;
};

struct RelativeErrorReport {
  std::vector<double> ratios;  // |H_{k+1}| / |Q_{k+1} - Q_k| for checked steps
  std::size_t skipped = 0;     // steps with |dQ| < 1e-14
  double max_ratio = 0.0;
  std::optional<std::size_t> first_violation;
  bool passed = true;
};

/// Passes iff every ratio is at most rho1 + 1e-8.
RelativeErrorReport check_relative_error(std::span<const RelativeErrorSample> trace, double rho1);

/// Mean of |P_{k+1} - P_k|^2 over the first `count` steps of the trace.
double running_mean_step(std::span<const LyapunovSample> trace, std::size_t count);

/// Empirical loss and its gradient at W (full batch).
using Objective = std::function<std::pair<double, ParamSet>(const ParamSet&)>;

enum class StepForm { primal, subgradient };

struct FullBatchTrace {
  std::vector<LyapunovSample> lyapunov;
  std::vector<RelativeErrorSample> relative;
  std::vector<std::vector<Tensor>> gammas;  // Gamma_k per step, when requested
  std::vector<ParamSet> weights;            // W_k per step, when requested
};

/// Runs `steps` plain full-batch iterations from `state` with constant alpha and
/// records the Lyapunov and relative-error traces. `form` selects the V-driven
/// update or its subgradient-driven equivalent.
FullBatchTrace trace_full_batch(const Objective& objective, CoupledState& state, const OptimizerConfig& cfg,
                                double alpha, std::size_t steps, StepForm form, bool keep_iterates = false);

/// Local Lipschitz estimate of the gradient at `at`: power iteration on
/// gradient differences (grad(W + r d) - grad(W)) / r, |d| = 1, from
/// `samples` random starts; returns the largest growth factor seen.
double estimate_lipschitz(const Objective& objective, const ParamSet& at, SeededRng& rng, std::size_t samples = 4,
                          double radius = 1e-4, std::size_t iterations = 50);

/// Per-layer slice of a path record.
struct LayerPathStats {
  std::string name;
  std::size_t support = 0;  // nonzero entries of Gamma
  std::size_t params = 0;   // weight entries
  std::size_t groups = 0;
  std::size_t active_groups = 0;
  double w_norm = 0.0;
  double v_max_group_norm = 0.0;
  // Per-group detail; present only for layers with few enough groups.
  std::vector<double> w_group_norms;
  std::vector<double> gamma_group_norms;
};

struct PathRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double metric = 0.0;
  std::vector<LayerPathStats> layers;  // penalized layers only
  std::vector<GrowEvent> events;

  /// Nonzero Gamma entries over all penalized weight entries.
  double support_fraction() const;
};

/// Snapshot of the penalized layers of `state`. Layers with at most
/// `detail_limit` groups carry per-group norms.
PathRecord make_path_record(std::size_t epoch, double loss, double metric, const CoupledState& state,
                            std::size_t detail_limit = 256);

/// For every layer in the path (by name, first-seen order) and each of its
/// groups, the first epoch whose record shows a nonzero Gamma group norm.
struct EntryTimes {
  std::string layer;
  std::vector<std::optional<std::size_t>> first_epoch;
};
std::vector<EntryTimes> support_entry_times(std::span<const PathRecord> path);

}  // namespace issnet
