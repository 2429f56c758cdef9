#include "issnet/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

double diff_sq(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double p_distance_sq(const Iterate& a, const Iterate& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.w.size(); ++i) {
    s += diff_sq(a.w[i].weight, b.w[i].weight) + diff_sq(a.w[i].bias, b.w[i].bias);
    s += diff_sq(a.gamma[i], b.gamma[i]);
  }
  return s;
}

double g_distance_sq(const Iterate& a, const Iterate& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.g.size(); ++i) s += diff_sq(a.g[i], b.g[i]);
  return s;
}

// |H_{k+1}|^2 from the iterates k+1 and k.
double h_norm_sq(const Iterate& next, const Iterate& cur, double alpha, double nu) {
  double s = 0.0;
  for (std::size_t i = 0; i < next.w.size(); ++i) {
    const Tensor& w = next.w[i].weight;
    const Tensor& grad = next.grad[i].weight;
    const Tensor& gamma = next.gamma[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double coupling = gamma.empty() ? 0.0 : (w[j] - gamma[j]) / nu;
      const double hw = alpha * (grad[j] + coupling);
      s += hw * hw;
    }
    for (std::size_t j = 0; j < next.grad[i].bias.size(); ++j) {
      const double hb = alpha * next.grad[i].bias[j];
      s += hb * hb;
    }
    for (std::size_t j = 0; j < gamma.size(); ++j) {
      const double hg = alpha * (gamma[j] - w[j]) / nu + next.g[i][j] - cur.g[i][j];
      const double hd = cur.gamma[i][j] - gamma[j];
      s += hg * hg + hd * hd;
    }
  }
  return s;
}

std::vector<std::optional<PenaltySpec>> penalties_of(const CoupledState& state) {
  std::vector<std::optional<PenaltySpec>> out;
  for (const CoupledLayer& c : state.layers) out.push_back(c.penalty);
  return out;
}

}  // namespace

Iterate Iterate::capture(const CoupledState& state, double loss, ParamSet grad) {
  Iterate it;
  it.w = state.params;
  for (const CoupledLayer& c : state.layers) {
    it.gamma.push_back(c.penalty ? c.gamma : Tensor());
    it.g.push_back(c.penalty ? c.g : Tensor());
  }
  it.loss = loss;
  it.grad = std::move(grad);
  return it;
}

LyapunovSample lyapunov(const Iterate& current, const Iterate& previous,
                        std::span<const std::optional<PenaltySpec>> penalties, double alpha, double nu) {
  if (penalties.size() != current.w.size() || previous.w.size() != current.w.size())
    throw DimensionError("lyapunov: iterates and penalties disagree on the layer count");
  LyapunovSample s;
  s.loss_bar = current.loss;
  for (std::size_t i = 0; i < penalties.size(); ++i) {
    if (!penalties[i]) continue;
    s.loss_bar += diff_sq(current.w[i].weight, current.gamma[i]) / (2.0 * nu);
    s.bregman_term += bregman(current.gamma[i], previous.gamma[i], previous.g[i], *penalties[i]);
  }
  s.F = alpha * s.loss_bar + s.bregman_term;
  return s;
}

double descent_rho(double kappa, double nu, double lip, double alpha) {
  return 1.0 / kappa - alpha * (lip + 1.0 / nu) / 2.0;
}

double relative_error_rho1(double kappa, double nu, double lip, double alpha) {
  return 2.0 / kappa + 1.0 + alpha * (lip + 2.0 / nu);
}

DescentReport check_sufficient_descent(std::span<const LyapunovSample> trace, double rho) {
  constexpr double kSlack = 1e-10;
  DescentReport report;
  report.max_violation = trace.size() > 1 ? -std::numeric_limits<double>::infinity() : 0.0;
  for (std::size_t k = 0; k + 1 < trace.size(); ++k) {
    const double excess = trace[k + 1].F - trace[k].F + rho * trace[k].p_step_norm_sq;
    report.max_violation = std::max(report.max_violation, excess);
    if (excess > kSlack) {
      ++report.violations;
      if (!report.first_violation) report.first_violation = trace[k].k;
    }
  }
  return report;
}

RelativeErrorReport check_relative_error(std::span<const RelativeErrorSample> trace, double rho1) {
  constexpr double kSkipBelow = 1e-14;
  constexpr double kTolerance = 1e-8;
  RelativeErrorReport report;
  for (const RelativeErrorSample& s : trace) {
    if (s.dq_norm < kSkipBelow) {
      ++report.skipped;
      continue;
    }
    const double ratio = s.h_norm / s.dq_norm;
    report.ratios.push_back(ratio);
    report.max_ratio = std::max(report.max_ratio, ratio);
    if (ratio > rho1 + kTolerance && report.passed) {
      report.passed = false;
      report.first_violation = s.k;
    }
  }
  return report;
}

double running_mean_step(std::span<const LyapunovSample> trace, std::size_t count) {
  if (count == 0 || count > trace.size())
    throw ArgumentError("running mean over " + std::to_string(count) + " of " + std::to_string(trace.size()) +
                        " steps");
  double s = 0.0;
  for (std::size_t k = 0; k < count; ++k) s += trace[k].p_step_norm_sq;
  return s / static_cast<double>(count);
}

FullBatchTrace trace_full_batch(const Objective& objective, CoupledState& state, const OptimizerConfig& cfg,
                                double alpha, std::size_t steps, StepForm form, bool keep_iterates) {
  if (cfg.variant != Variant::naive) throw ArgumentError("full-batch traces use the plain update");
  const auto penalties = penalties_of(state);
  FullBatchTrace trace;

  auto evaluate = [&] {
    auto [loss, grad] = objective(state.params);
    return Iterate::capture(state, loss, std::move(grad));
  };
  auto keep = [&](const Iterate& it) {
    if (!keep_iterates) return;
    trace.gammas.push_back(it.gamma);
    trace.weights.push_back(it.w);
  };

  std::optional<Iterate> before;  // k - 1
  Iterate current = evaluate();   // k
  keep(current);
  for (std::size_t k = 0; k < steps; ++k) {
    if (form == StepForm::primal)
      dessilbi_step(state, current.grad, cfg, alpha);
    else
      lbi_reformulated_step(state, current.grad, cfg, alpha);
    Iterate next = evaluate();
    keep(next);
    if (before) {
      LyapunovSample s = lyapunov(current, *before, penalties, alpha, cfg.nu);
      s.k = k;
      s.p_step_norm_sq = p_distance_sq(next, current);
      trace.lyapunov.push_back(s);
      RelativeErrorSample r;
      r.k = k + 1;
      r.h_norm = std::sqrt(h_norm_sq(next, current, alpha, cfg.nu));
      r.dq_norm = std::sqrt(p_distance_sq(next, current) + g_distance_sq(current, *before));
      trace.relative.push_back(r);
    }
    before = std::move(current);
    current = std::move(next);
  }
  if (before) {
    LyapunovSample s = lyapunov(current, *before, penalties, alpha, cfg.nu);
    s.k = steps;
    trace.lyapunov.push_back(s);
  }
  return trace;
}

double estimate_lipschitz(const Objective& objective, const ParamSet& at, SeededRng& rng, std::size_t samples,
                          double radius, std::size_t iterations) {
  if (samples == 0 || iterations == 0 || !(radius > 0.0))
    throw ArgumentError("lipschitz estimate needs samples, iterations and a positive radius");
  const ParamSet base = objective(at).second;
  auto total_norm = [](const ParamSet& p) {
    double s = 0.0;
    for (const LayerParams& l : p.layers) s += squared_norm(l.weight) + squared_norm(l.bias);
    return std::sqrt(s);
  };
  double best = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    ParamSet dir = at.zeros_like();
    for (LayerParams& p : dir.layers) {
      for (double& v : p.weight.values()) v = rng.normal();
      for (double& v : p.bias.values()) v = rng.normal();
    }
    for (std::size_t it = 0; it < iterations; ++it) {
      const double n = total_norm(dir);
      if (n == 0.0) break;
      ParamSet moved = at;
      for (std::size_t i = 0; i < moved.size(); ++i) {
        axpy(radius / n, dir[i].weight, moved[i].weight);
        axpy(radius / n, dir[i].bias, moved[i].bias);
      }
      ParamSet grad = objective(moved).second;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        axpy(-1.0, base[i].weight, grad[i].weight);
        axpy(-1.0, base[i].bias, grad[i].bias);
      }
      best = std::max(best, total_norm(grad) / radius);
      dir = std::move(grad);
    }
  }
  return best;
}

double PathRecord::support_fraction() const {
  std::size_t support = 0, params = 0;
  for (const LayerPathStats& l : layers) {
    support += l.support;
    params += l.params;
  }
  return params ? static_cast<double>(support) / static_cast<double>(params) : 0.0;
}

PathRecord make_path_record(std::size_t epoch, double loss, double metric, const CoupledState& state,
                            std::size_t detail_limit) {
  PathRecord record;
  record.epoch = epoch;
  record.loss = loss;
  record.metric = metric;
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    const CoupledLayer& c = state.layers[i];
    if (!c.penalty) continue;
    const Tensor& w = state.params[i].weight;
    const Grouping grouping = grouping_for(*c.penalty, w.shape());
    LayerPathStats l;
    l.name = state.params[i].name;
    l.support = count_nonzero(c.gamma);
    l.params = w.size();
    l.groups = grouping.groups;
    l.active_groups = active_groups(c.gamma, grouping);
    l.w_norm = norm(w);
    const std::vector<double> v_norms = group_norms(c.v, grouping);
    l.v_max_group_norm = v_norms.empty() ? 0.0 : *std::max_element(v_norms.begin(), v_norms.end());
    if (grouping.groups <= detail_limit) {
      l.w_group_norms = group_norms(w, grouping);
      l.gamma_group_norms = group_norms(c.gamma, grouping);
    }
    record.layers.push_back(std::move(l));
  }
  return record;
}

std::vector<EntryTimes> support_entry_times(std::span<const PathRecord> path) {
  std::vector<EntryTimes> out;
  std::map<std::string, std::size_t> slot;
  for (const PathRecord& record : path) {
    for (const LayerPathStats& l : record.layers) {
      auto [it, inserted] = slot.try_emplace(l.name, out.size());
      if (inserted) out.push_back({l.name, {}});
      auto& first = out[it->second].first_epoch;
      if (first.size() < l.gamma_group_norms.size()) first.resize(l.gamma_group_norms.size());
      for (std::size_t j = 0; j < l.gamma_group_norms.size(); ++j)
        if (l.gamma_group_norms[j] > 0.0 && !first[j]) first[j] = record.epoch;
    }
  }
  return out;
}

}  // namespace issnet
