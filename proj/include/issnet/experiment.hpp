#pragma once

#include <cstddef>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "issnet/config.hpp"
#include "issnet/data.hpp"
#include "issnet/diagnostics.hpp"
#include "issnet/grow.hpp"
#include "issnet/pathlog.hpp"

namespace issnet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Maps library errors onto process exit codes.
int exit_code_for(const std::exception& e);

/// Train/test split described by the dataset config.
TrainTest load_dataset(const DatasetConfig& cfg, std::uint64_t seed);

struct RunSummary {
  std::string task;
  std::filesystem::path out;
  double final_metric = 0.0;
  Json report;  // task-specific, also written to <out>/report.json
};

/// Executes one experiment, writing path.jsonl, checkpoints and report.json
/// under cfg.out. On failure an error record is appended to the log and the
/// exception is rethrown.
RunSummary run(const ExperimentConfig& cfg);

/// Growth phase followed by the post-growth phase, shared by the `grow`
/// task and the acceptance suite.
struct GrowthOutcome {
  NetworkSpec net;
  CoupledState state;
  std::vector<GrowEvent> events;
  std::size_t growth_epochs = 0;  // epochs spent before finalize
  bool zero_check_held = true;    // zeroed new filters reproduced the old outputs at every event
  double final_metric = 0.0;
};

struct GrowthSetup {
  OptimizerConfig optimizer;
  GrowthPolicy policy;
  bool enabled = true;            // false trains the seed network on the same schedule
  std::size_t max_growth_epochs = 30;
  std::size_t batch_size = 128;
  std::size_t detail_limit = 256;
};

GrowthOutcome run_growth(NetworkSpec net, CoupledState state, const GrowthSetup& setup, const TrainTest& data,
                         SeededRng& order_rng, SeededRng& grow_rng,
                         const std::function<void(const PathRecord&)>& on_epoch = {});

}  // namespace issnet
