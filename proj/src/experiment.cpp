#include "issnet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "issnet/checkpoint.hpp"
#include "issnet/errors.hpp"
#include "issnet/linalg.hpp"
#include "issnet/sparsify.hpp"
#include "issnet/training.hpp"

namespace issnet {

namespace {

constexpr std::size_t kProbeRows = 64;

struct Context {
  const ExperimentConfig& cfg;
  Json provenance;
  std::string hash;
  PathLog& log;
};

void write_json(const std::filesystem::path& file, const Json& j) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

void save(const Context& ctx, const std::filesystem::path& file, std::size_t epoch, const NetworkSpec& net,
          const CoupledState& state, std::optional<Mask> mask = std::nullopt) {
  save_checkpoint(file, {epoch, ctx.cfg.seed, ctx.hash, net, state, std::move(mask)},
                  ctx.cfg.checkpoint_f32 ? ElementType::f32 : ElementType::f64);
}

bool wants_checkpoint(const ExperimentConfig& cfg, std::size_t epoch, std::size_t last) {
  return epoch == last || cfg.checkpoint_every_epoch ||
         std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), epoch) != cfg.checkpoint_epochs.end();
}

Json prune_json(const PruneReport& r) {
  Json layers = Json::array();
  for (const LayerPruneStats& l : r.layers)
    layers.push_back({{"name", l.name}, {"kept", l.kept}, {"total", l.total}, {"macs", l.macs}});
  return {{"sparsity", r.sparsity}, {"macs", r.macs}, {"layers", layers}};
}

// Path record for plain (mask-constrained) training: support counts the
// nonzero weights of the layers the mask covers.
PathRecord masked_record(std::size_t epoch, double loss, double metric, const ParamSet& params, const Mask& mask) {
  PathRecord r{epoch, loss, metric, {}, {}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask.layers[i].empty()) continue;
    LayerPathStats s;
    s.name = params[i].name;
    s.params = params[i].weight.size();
    s.support = count_nonzero(params[i].weight);
    const Grouping grouping = grouping_for({PenaltyKind::group_lasso, 1.0}, params[i].weight.shape());
    s.groups = grouping.groups;
    s.active_groups = active_groups(params[i].weight, grouping);
    s.w_norm = norm(params[i].weight);
    r.layers.push_back(std::move(s));
  }
  return r;
}

Tensor probe_inputs(const Dataset& data) {
  return data.head(kProbeRows).x;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

RunSummary run_train(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const TrainTest data = load_dataset(cfg.dataset, cfg.seed);
  SeededRng rng(cfg.seed);
  ParamSet params = init_params(cfg.network, rng);
  SeededRng order = rng.split();
  const bool sgd = cfg.trainer == "sgd";
  const auto penalties =
      sgd ? std::vector<std::optional<PenaltySpec>>(params.size()) : default_penalties(params, cfg.lambda);
  CoupledState state = CoupledState::init(std::move(params), penalties);
  ParamSet velocity = state.params.zeros_like();

  auto sync_velocity = [&] {
    if (!sgd) return;
    for (std::size_t i = 0; i < state.layers.size(); ++i) {
      state.layers[i].momentum = velocity[i].weight;
      state.layers[i].bias_momentum = velocity[i].bias;
    }
  };

  save(ctx, checkpoint_path(cfg.out, 0), 0, cfg.network, state);
  double metric = cfg.epochs == 0 ? evaluate(cfg.network, state.params, data.test) : 0.0;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double alpha = cfg.optimizer.alpha.at(e - 1);
    double loss = 0.0;
    if (sgd) {
      SgdConfig s = cfg.sgd;
      s.lr = cfg.sgd.lr * alpha / cfg.optimizer.alpha.initial;
      loss = train_epoch_sgd(cfg.network, state.params, velocity, s, data.train, cfg.batch_size, order);
    } else {
      loss = train_epoch(cfg.network, state, cfg.optimizer, alpha, data.train, cfg.batch_size, order);
    }
    metric = evaluate(cfg.network, state.params, data.test);
    ctx.log.epoch(make_path_record(e, loss, metric, state, cfg.path_detail_limit));
    if (wants_checkpoint(cfg, e, cfg.epochs)) {
      sync_velocity();
      save(ctx, checkpoint_path(cfg.out, e), e, cfg.network, state);
    }
  }
  const PathRecord last = make_path_record(cfg.epochs, 0.0, metric, state, 0);
  Json report = {{"final_metric", metric},
                 {"epochs", cfg.epochs},
                 {"support_fraction", last.support_fraction()},
                 {"selected", prune_json(prune_report(cfg.network, apply_mask(state.params, weight_mask(state))))}};
  return {"train", cfg.out, metric, report};
}

RunSummary run_ticket(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  if (cfg.ticket.source.empty()) throw ArgumentError("ticket.source must name the run directory of the dense run");
  const Checkpoint ck = load_checkpoint(checkpoint_path(cfg.ticket.source, cfg.ticket.epoch));
  const Ticket ticket = extract_ticket(ck.state, cfg.ticket.epoch, cfg.ticket.level);
  if (ticket.degenerate)
    ctx.log.write({{"type", "warning"}, {"message", "ticket mask selects nothing (degenerate)"}});
  const ParamSet init = cfg.ticket.init == "early"
                            ? ticket.snapshot
                            : apply_mask(load_checkpoint(checkpoint_path(cfg.ticket.source, 0)).state.params,
                                         ticket.mask);
  const TrainTest data = load_dataset(cfg.dataset, cfg.seed);
  SeededRng rng(cfg.seed);
  SeededRng order = rng.split();
  MaskedTraining mt{cfg.sgd, cfg.ticket.retrain_epochs, cfg.batch_size};
  double metric = evaluate(ck.net, init, data.test);
  const ParamSet trained =
      train_masked(ck.net, init, ticket.mask, mt, data.train, order, [&](std::size_t e, double loss, const ParamSet& p) {
        metric = evaluate(ck.net, p, data.test);
        ctx.log.epoch(masked_record(e, loss, metric, p, ticket.mask));
      });
  CoupledState out = CoupledState::init(trained, std::vector<std::optional<PenaltySpec>>(trained.size()));
  save(ctx, checkpoint_path(cfg.out, cfg.ticket.retrain_epochs), cfg.ticket.retrain_epochs, ck.net, out, ticket.mask);
  Json report = {{"final_metric", metric},
                 {"ticket_epoch", cfg.ticket.epoch},
                 {"level", mask_level_name(cfg.ticket.level)},
                 {"density", ticket.mask.density(ck.state.params)},
                 {"degenerate", ticket.degenerate},
                 {"init", cfg.ticket.init},
                 {"retrain_epochs", cfg.ticket.retrain_epochs}};
  return {"ticket", cfg.out, metric, report};
}

RunSummary run_prune(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  if (cfg.prune.checkpoint.empty()) throw ArgumentError("prune.checkpoint must name a checkpoint file");
  const Checkpoint ck = load_checkpoint(cfg.prune.checkpoint);
  const TrainTest data = load_dataset(cfg.dataset, cfg.seed);
  const Mask mask = cfg.prune.level == MaskLevel::weight   ? weight_mask(ck.state)
                    : cfg.prune.level == MaskLevel::filter ? filter_mask(ck.state)
                                                           : layer_mask(ck.state);
  const double dense_metric = evaluate(ck.net, ck.state.params, data.test);
  NetworkSpec net = ck.net;
  ParamSet params = apply_mask(ck.state.params, mask);
  Mask kept = mask;
  Json removed = Json::array();
  if (cfg.prune.remove_layers) {
    PrunedNetwork pruned = prune_layers(ck.net, ck.state);
    for (const std::string& name : pruned.removed) removed.push_back(name);
    net = std::move(pruned.net);
    params = std::move(pruned.params);
    kept = full_mask(params);
    for (std::size_t i = 0; i < params.size(); ++i) kept.layers[i] = weight_keep(params[i].weight);
  }
  const double masked_metric = evaluate(net, params, data.test);
  double metric = masked_metric;
  if (cfg.prune.finetune_epochs > 0) {
    SeededRng rng(cfg.seed);
    SeededRng order = rng.split();
    MaskedTraining mt{cfg.sgd, cfg.prune.finetune_epochs, cfg.batch_size};
    mt.sgd.lr *= 0.1;
    params = train_masked(net, params, kept, mt, data.train, order, [&](std::size_t e, double loss, const ParamSet& p) {
      metric = evaluate(net, p, data.test);
      ctx.log.epoch(masked_record(e, loss, metric, p, kept));
    });
  }
  CoupledState out = CoupledState::init(params, std::vector<std::optional<PenaltySpec>>(params.size()));
  save(ctx, cfg.out / "pruned.bin", ck.epoch, net, out, kept);
  Json report = {{"final_metric", metric},
                 {"dense_metric", dense_metric},
                 {"masked_metric", masked_metric},
                 {"level", mask_level_name(cfg.prune.level)},
                 {"removed_blocks", removed},
                 {"source_epoch", ck.epoch},
                 {"pruned", prune_json(prune_report(net, params))}};
  return {"prune", cfg.out, metric, report};
}

RunSummary run_grow(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const TrainTest data = load_dataset(cfg.dataset, cfg.seed);
  SeededRng rng(cfg.seed);
  ParamSet params = init_params(cfg.network, rng);
  SeededRng order = rng.split();
  SeededRng grow_rng = rng.split();
  CoupledState state = CoupledState::init(params, default_penalties(params, cfg.lambda));
  GrowthSetup setup;
  setup.optimizer = cfg.optimizer;
  setup.policy = cfg.growth.value_or(GrowthPolicy{});
  setup.max_growth_epochs = cfg.grow_epochs;
  setup.batch_size = cfg.batch_size;
  setup.detail_limit = cfg.path_detail_limit;
  save(ctx, checkpoint_path(cfg.out, 0), 0, cfg.network, state);
  GrowthOutcome g = run_growth(cfg.network, std::move(state), setup, data, order, grow_rng,
                               [&](const PathRecord& r) { ctx.log.epoch(r); });
  const std::size_t last = g.growth_epochs + setup.policy.post_epochs;
  save(ctx, checkpoint_path(cfg.out, last), last, g.net, g.state);
  Json events = Json::array();
  for (const GrowEvent& e : g.events) events.push_back(to_json(e));
  Json report = {{"final_metric", g.final_metric},
                 {"growth_epochs", g.growth_epochs},
                 {"post_epochs", setup.policy.post_epochs},
                 {"post_alpha", finalize_alpha(cfg.optimizer, setup.policy, g.growth_epochs)},
                 {"events", events},
                 {"zero_check_held", g.zero_check_held},
                 {"network", to_json(g.net)}};
  return {"grow", cfg.out, g.final_metric, report};
}

RunSummary run_diagnose(const Context& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const DiagnoseConfig& d = cfg.diagnose;
  const SyntheticRegression sr = gen_synthetic(d.n, d.d, std::min<std::size_t>(3, d.d), 0.1, cfg.seed);
  const bool exact = d.problem == "least_squares";
  NetworkSpec net;
  net.input = {d.d};
  net.loss = LossKind::mse;
  if (exact)
    net.layers = {LayerSpec::dense(d.d, 1, false)};
  else
    net.layers = {LayerSpec::dense(d.d, 16), LayerSpec::activation(Activation::tanh), LayerSpec::dense(16, 1)};
  const Dataset& data = sr.data;
  const Objective objective = [&](const ParamSet& p) {
    LossAndGradient lg = loss_and_gradient(net, p, data.x, data.y);
    return std::make_pair(lg.loss, std::move(lg.gradient));
  };
  SeededRng rng(cfg.seed);
  const ParamSet init = init_params(net, rng);
  double lip = 0.0;
  if (exact) {
    lip = spectral_norm_sq(data.x) / static_cast<double>(d.n);
  } else {
    SeededRng lip_rng = rng.split();
    lip = 2.0 * estimate_lipschitz(objective, init, lip_rng, d.lip_samples);
  }
  OptimizerConfig o = cfg.optimizer;
  o.variant = Variant::naive;
  const double alpha = d.step_fraction * max_step_size(o.kappa, o.nu, lip);
  std::vector<std::optional<PenaltySpec>> penalties;
  for (const LayerParams& p : init.layers) {
    (void)p;
    penalties.push_back(PenaltySpec{PenaltyKind::lasso, d.lambda});
  }
  CoupledState primal = CoupledState::init(init, penalties);
  CoupledState dual = CoupledState::init(init, penalties);
  const FullBatchTrace t1 = trace_full_batch(objective, primal, o, alpha, d.steps, StepForm::primal);
  const FullBatchTrace t2 = trace_full_batch(objective, dual, o, alpha, d.steps, StepForm::subgradient);
  const double rho = descent_rho(o.kappa, o.nu, lip, alpha);
  const double rho1 = relative_error_rho1(o.kappa, o.nu, lip, alpha);
  const DescentReport descent = check_sufficient_descent(t1.lyapunov, rho);
  const RelativeErrorReport rel = check_relative_error(t2.relative, rho1);

  {
    std::ofstream csv(cfg.out / "lyapunov.csv", std::ios::trunc);
    csv.precision(17);
    csv << "k,F,loss_bar,bregman_term,p_step_norm_sq\n";
    for (const LyapunovSample& s : t1.lyapunov)
      csv << s.k << ',' << s.F << ',' << s.loss_bar << ',' << s.bregman_term << ',' << s.p_step_norm_sq << '\n';
    std::ofstream rcsv(cfg.out / "relative_error.csv", std::ios::trunc);
    rcsv.precision(17);
    rcsv << "k,h_norm,dq_norm\n";
    for (const RelativeErrorSample& s : t2.relative) rcsv << s.k << ',' << s.h_norm << ',' << s.dq_norm << '\n';
  }

  Json report = {{"problem", d.problem},
                 {"lip", lip},
                 {"lip_source", exact ? "exact" : "estimated-Lip"},
                 {"alpha", alpha},
                 {"rho", rho},
                 {"rho1", rho1},
                 {"steps", d.steps},
                 {"descent_violations", descent.violations},
                 {"descent_max_excess", descent.max_violation},
                 {"relative_max_ratio", rel.max_ratio},
                 {"relative_skipped", rel.skipped},
                 {"relative_passed", rel.passed}};
  bool ok = descent.passed() && rel.passed;
  if (t1.lyapunov.size() >= 400) {
    const double m100 = running_mean_step(t1.lyapunov, 100), m400 = running_mean_step(t1.lyapunov, 400);
    report["running_mean_100"] = m100;
    report["running_mean_400"] = m400;
    report["rate_passed"] = m400 <= 0.5 * m100;
    ok = ok && m400 <= 0.5 * m100;
  }
  report["passed"] = ok;
  ctx.log.write({{"type", "diagnostic"}, {"report", report}});
  write_json(cfg.out / "report.json", report);
  if (!ok) throw NumericError("convergence diagnostics failed; see " + (cfg.out / "report.json").string());
  return {"diagnose", cfg.out, descent.max_violation, report};
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const NotFoundError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const ContractError*>(&e)) return kExitNumeric;
  return kExitUsage;
}

TrainTest load_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  TrainTest out;
  if (cfg.kind == "synthetic") {
    const SyntheticRegression sr = gen_synthetic(cfg.n, cfg.d, cfg.s, cfg.sigma, seed);
    const std::size_t test = static_cast<std::size_t>(std::floor(cfg.test_fraction * static_cast<double>(cfg.n)));
    if (test == 0) {
      out.train = out.test = sr.data;
    } else {
      std::vector<std::size_t> rows(cfg.n);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      out.train = sr.data.select(std::span<const std::size_t>(rows.data(), cfg.n - test));
      out.test = sr.data.select(std::span<const std::size_t>(rows.data() + cfg.n - test, test));
    }
  } else {
    out = load_mnist_dir(cfg.dir, cfg.layout == "chw" ? ImageLayout::chw : ImageLayout::flat);
  }
  if (cfg.train_limit) out.train = out.train.head(cfg.train_limit);
  if (cfg.test_limit) out.test = out.test.head(cfg.test_limit);
  return out;
}

GrowthOutcome run_growth(NetworkSpec net, CoupledState state, const GrowthSetup& setup, const TrainTest& data,
                         SeededRng& order_rng, SeededRng& grow_rng,
                         const std::function<void(const PathRecord&)>& on_epoch) {
  setup.policy.validate();
  GrowthOutcome g;
  const Tensor probe = probe_inputs(data.test);
  std::vector<double> losses;
  for (std::size_t e = 1; e <= setup.max_growth_epochs; ++e) {
    const double loss =
        train_epoch(net, state, setup.optimizer, setup.optimizer.alpha.at(e - 1), data.train, setup.batch_size, order_rng);
    losses.push_back(loss);
    g.growth_epochs = e;
    std::vector<GrowEvent> events;
    bool plateau = false;
    if (setup.enabled && e % setup.policy.period == 0) {
      plateau = growth_plateaued(losses, setup.policy);
      if (!plateau) {
        const Tensor before = predict(net, state.params, probe);
        events = maybe_grow(net, state, setup.policy, e, grow_rng);
        if (!events.empty()) {
          ParamSet zeroed = state.params;
          for (const GrowEvent& ev : events)
            zeroed = zero_filters_from(zeroed, zeroed.index_of(ev.layer), ev.old_width);
          if (!same_values(before, predict(net, zeroed, probe))) g.zero_check_held = false;
        }
      }
    }
    PathRecord record = make_path_record(e, loss, evaluate(net, state.params, data.test), state, setup.detail_limit);
    record.events = events;
    g.events.insert(g.events.end(), events.begin(), events.end());
    if (on_epoch) on_epoch(record);
    if (plateau) break;
  }
  finalize(net, state, setup.policy, setup.optimizer, g.growth_epochs, data.train, setup.batch_size, order_rng,
           [&](std::size_t e, double loss) {
             if (on_epoch)
               on_epoch(make_path_record(e, loss, evaluate(net, state.params, data.test), state, setup.detail_limit));
           });
  g.final_metric = evaluate(net, state.params, data.test);
  g.net = std::move(net);
  g.state = std::move(state);
  return g;
}

RunSummary run(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.task == Task::export_plots) {
    if (cfg.log.empty()) throw ArgumentError("export needs the path log to convert (log)");
    const ExportSummary s = export_plot_data(cfg.log, cfg.out);
    Json files = Json::array();
    for (const auto& f : s.files) files.push_back(f.string());
    return {"export", cfg.out, 0.0, {{"rows", s.rows}, {"files", files}}};
  }
  std::filesystem::create_directories(cfg.out);
  Json provenance = to_json(cfg);
  provenance.erase("out");
  const std::string hash = config_hash(provenance);
  PathLog log(cfg.out / "path.jsonl");
  Json header = {{"type", "header"}, {"task", task_name(cfg.task)}, {"seed", cfg.seed},
                 {"config_hash", hash}, {"config", provenance}};
  if (cfg.task == Task::grow)
    header["growth_plateau_tolerance"] = cfg.growth.value_or(GrowthPolicy{}).plateau_tolerance;
  log.write(header);
  const Context ctx{cfg, provenance, hash, log};
  try {
    RunSummary summary;
    switch (cfg.task) {
      case Task::train:
        summary = run_train(ctx);
        break;
      case Task::ticket:
        summary = run_ticket(ctx);
        break;
      case Task::prune:
        summary = run_prune(ctx);
        break;
      case Task::grow:
        summary = run_grow(ctx);
        break;
      case Task::diagnose:
        summary = run_diagnose(ctx);
        break;
      case Task::export_plots:
        break;
    }
    summary.report["seed"] = cfg.seed;
    summary.report["config_hash"] = hash;
    summary.report["task"] = summary.task;
    if (cfg.task != Task::diagnose) {
      log.write({{"type", "report"}, {"report", summary.report}});
      write_json(cfg.out / "report.json", summary.report);
    }
    return summary;
  } catch (const std::exception& e) {
    log.error(exit_code_for(e) == kExitData ? "data" : exit_code_for(e) == kExitNumeric ? "numeric" : "usage",
              e.what());
    throw;
  }
}

}  // namespace issnet
