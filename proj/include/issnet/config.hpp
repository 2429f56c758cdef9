#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "issnet/grow.hpp"
#include "issnet/network.hpp"
#include "issnet/optimizer.hpp"
#include "issnet/penalty.hpp"
#include "issnet/sparsify.hpp"

namespace issnet {

using Json = nlohmann::json;

enum class Task { train, prune, ticket, grow, diagnose, export_plots };

struct DatasetConfig {
  std::string kind = "mnist";  // mnist | synthetic
  std::filesystem::path dir = "data/mnist-10k";
  std::string layout = "flat";  // flat | chw
  std::size_t train_limit = 0;  // 0 keeps every training row
  std::size_t test_limit = 0;
  // synthetic regression
  std::size_t n = 100, d = 20, s = 3;
  double sigma = 0.1;
  double test_fraction = 0.0;
};

struct TicketConfig {
  std::size_t epoch = 2;
  MaskLevel level = MaskLevel::weight;
  std::filesystem::path source;  // run directory holding the epoch checkpoint
  std::size_t retrain_epochs = 20;
  std::string init = "early";  // early (snapshot at `epoch`) | initial (epoch 0)
};

struct PruneConfig {
  std::filesystem::path checkpoint;
  MaskLevel level = MaskLevel::weight;
  bool remove_layers = false;
  std::size_t finetune_epochs = 0;  // fine-tune at rate x0.1 after masking
};

struct DiagnoseConfig {
  std::string problem = "least_squares";  // least_squares | network
  std::size_t n = 50, d = 20;
  std::size_t steps = 500;
  double step_fraction = 0.9;  // alpha as a fraction of max_step_size
  double lambda = 1.0;
  std::size_t lip_samples = 16;
};

struct ExperimentConfig {
  Task task = Task::train;
  std::uint64_t seed = 1;
  std::filesystem::path out = "runs/default";
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  DatasetConfig dataset;
  NetworkSpec network;
  std::string trainer = "dessilbi";  // dessilbi | sgd
  OptimizerConfig optimizer;
  SgdConfig sgd;
  double lambda = 1.0;
  std::optional<GrowthPolicy> growth;
  std::size_t grow_epochs = 30;  // cap on the growth phase
  std::vector<std::size_t> checkpoint_epochs;  // in addition to epoch 0 and the last epoch
  bool checkpoint_every_epoch = false;
  bool checkpoint_f32 = false;
  std::size_t path_detail_limit = 256;
  TicketConfig ticket;
  PruneConfig prune;
  DiagnoseConfig diagnose;
  std::filesystem::path log;  // export: path log to convert

  void validate() const;
};

std::string task_name(Task t);
Task parse_task(const std::string& s);
std::string mask_level_name(MaskLevel l);
MaskLevel parse_mask_level(const std::string& s);

Json to_json(const NetworkSpec& net);
NetworkSpec network_from_json(const Json& j);
Json to_json(const OptimizerConfig& cfg);
Json to_json(const GrowthPolicy& p);
Json to_json(const std::optional<PenaltySpec>& p);
std::optional<PenaltySpec> penalty_from_json(const Json& j);

/// Fully resolved configuration (every field present).
Json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are an ArgumentError.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets the dotted key (e.g. "optimizer.nu") in `j` to `value`, which is
/// parsed as JSON when possible and kept as a string otherwise.
void set_path(Json& j, const std::string& dotted, const std::string& value);

/// 64-bit FNV-1a of the canonical serialization, as 16 hex digits.
std::string config_hash(const Json& resolved);

}  // namespace issnet
