#pragma once

// Declarative experiment configuration and its JSON form.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spat/data.hpp"
#include "spat/model.hpp"

namespace spat {

struct OptimConfig {
  double lr = 3e-4;
  std::optional<double> finetune_lr;  // defaults to lr
  std::size_t epochs = 10;
  std::optional<std::size_t> finetune_epochs;  // defaults to epochs / 2
  std::size_t patience = 5;                    // 0 disables early stopping
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  double effective_finetune_lr() const { return finetune_lr.value_or(lr); }
  std::size_t effective_finetune_epochs() const { return finetune_epochs.value_or(epochs / 2); }

  bool operator==(const OptimConfig&) const = default;
};

struct PruningConfig {
  double alpha = 0.3;
  std::size_t score_batches = 0;  // 0: one full pass over the training windows
  bool iterative = false;         // re-score after each single-layer removal

  bool operator==(const PruningConfig&) const = default;
};

struct DatasetConfig {
  std::string name = "synthetic";
  std::string path;                       // CSV file; empty means synthetic
  std::optional<SyntheticSpec> synthetic;  // used when path is empty
  DateColumn date = DateColumn::automatic;
  SplitSpec split;

  bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;  // lookback/horizon mirror `window`; channels come from the data
  std::size_t stride = 1;
  OptimConfig optim;
  PruningConfig pruning;
  std::uint64_t seed = 2024;
  std::string run_dir = "runs/default";
  bool record_wall_time = false;

  WindowSpec window() const { return {model.lookback, model.horizon, stride}; }
  // Throws ConfigError with the offending field path.
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Reads the fields present in `j` on top of `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

ExperimentConfig load_experiment(const std::string& path);
void save_experiment(const std::string& path, const ExperimentConfig& cfg);

// Canonical serialized form used for hashing and run snapshots.
std::string canonical_json(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

// Published per-dataset training settings for the two reference architectures.
struct Preset {
  double lr;
  std::size_t d_model;
  std::size_t d_ff;
  std::size_t layers;
};

// architecture: "patchtst" or "itransformer"; dataset e.g. "ETTh1". nullopt if unknown.
std::optional<Preset> find_preset(const std::string& architecture, const std::string& dataset);
// Applies the preset and the matching token mode. Throws ConfigError if unknown.
void apply_preset(ExperimentConfig& cfg, const std::string& architecture,
                  const std::string& dataset);

}  // namespace spat
