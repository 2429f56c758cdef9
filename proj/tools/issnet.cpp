// Command-line front end: one subcommand per experiment task.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "issnet/errors.hpp"
#include "issnet/experiment.hpp"

namespace {

struct Overrides {
  std::vector<std::pair<std::string, std::string>> values;

  template <typename T>
  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    auto* slot = &values;
    app->add_option_function<T>(
        name, [slot, key](const T& v) {
          if constexpr (std::is_same_v<T, std::string>)
            slot->emplace_back(key, issnet::Json(v).dump());
          else
            slot->emplace_back(key, std::to_string(v));
        },
        help);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"issnet: DessiLBI training, sparsity paths, pruning, tickets and growth"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "issnet 0.1");

  std::string config_file;
  std::vector<std::string> sets;
  Overrides over;
  const std::vector<std::pair<std::string, std::string>> tasks = {
      {"train", "train a network with DessiLBI or SGD and record its regularization path"},
      {"prune", "mask a checkpoint at weight/filter/layer level and report sparsity"},
      {"ticket", "extract an early-epoch ticket and retrain it with SGD"},
      {"grow", "train a CNN that widens layers whose selected fraction exceeds the threshold"},
      {"diagnose", "check sufficient descent and the relative-error bound on a full-batch trace"},
      {"export", "convert a path log into plotting CSVs"}};

  for (const auto& [name, help] : tasks) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override a config key, e.g. --set optimizer.nu=100");
    over.flag<std::uint64_t>(sub, "--seed", "seed", "random seed");
    over.flag<std::string>(sub, "--out", "out", "output directory");
    if (name == "export") {
      over.flag<std::string>(sub, "--log", "log", "path log to convert");
      continue;
    }
    over.flag<std::size_t>(sub, "--epochs", "epochs", "training epochs");
    over.flag<std::size_t>(sub, "--batch-size", "batch_size", "mini-batch size");
    over.flag<double>(sub, "--lambda", "lambda", "penalty strength");
    over.flag<double>(sub, "--kappa", "optimizer.kappa", "kappa");
    over.flag<double>(sub, "--nu", "optimizer.nu", "coupling nu");
    over.flag<double>(sub, "--alpha", "optimizer.alpha.initial", "initial step size");
    over.flag<std::string>(sub, "--variant", "optimizer.variant",
                           "naive | momentum | momentum_weight_decay | magnitude_scaled");
    over.flag<std::string>(sub, "--trainer", "trainer", "dessilbi | sgd");
    over.flag<std::string>(sub, "--data", "dataset.dir", "MNIST-style IDX directory");
    if (name == "prune") {
      over.flag<std::string>(sub, "--checkpoint", "prune.checkpoint", "checkpoint to prune");
      over.flag<std::string>(sub, "--level", "prune.level", "weight | filter | layer");
      over.flag<std::size_t>(sub, "--finetune-epochs", "prune.finetune_epochs", "fine-tune epochs at rate x0.1");
      sub->add_flag_callback("--remove-layers", [&over] { over.values.emplace_back("prune.remove_layers", "true"); },
                             "drop residual blocks with empty support");
    } else if (name == "ticket") {
      over.flag<std::string>(sub, "--source", "ticket.source", "run directory of the dense run");
      over.flag<std::size_t>(sub, "--ticket-epoch", "ticket.epoch", "epoch whose support becomes the mask");
      over.flag<std::string>(sub, "--level", "ticket.level", "weight | filter");
      over.flag<std::size_t>(sub, "--retrain-epochs", "ticket.retrain_epochs", "SGD retraining epochs");
      over.flag<std::string>(sub, "--init", "ticket.init", "early | initial");
    } else if (name == "grow") {
      over.flag<std::size_t>(sub, "--grow-epochs", "grow_epochs", "cap on the growth phase");
    } else if (name == "diagnose") {
      over.flag<std::string>(sub, "--problem", "diagnose.problem", "least_squares | network");
      over.flag<std::size_t>(sub, "--steps", "diagnose.steps", "full-batch iterations");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : issnet::kExitUsage;
  }

  try {
    issnet::Json j = issnet::Json::object();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      j = issnet::Json::parse(in, nullptr, false);
      if (j.is_discarded()) throw issnet::ArgumentError(config_file + ": not valid JSON");
    }
    j["task"] = app.get_subcommands().front()->get_name();
    for (const auto& [key, value] : over.values) issnet::set_path(j, key, value);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw issnet::ArgumentError("--set expects key=value, got '" + s + "'");
      issnet::set_path(j, s.substr(0, eq), s.substr(eq + 1));
    }
    const issnet::ExperimentConfig cfg = issnet::config_from_json(j);
    const issnet::RunSummary summary = issnet::run(cfg);
    std::cout << summary.report.dump() << '\n';
    return issnet::kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "issnet: " << e.what() << '\n';
    return issnet::exit_code_for(e);
  }
}
