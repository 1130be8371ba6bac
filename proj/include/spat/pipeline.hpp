#pragma once

// Pretrain -> score -> prune -> finetune -> evaluate, as library calls and as a
// single run that writes its artifacts to a directory.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spat/config.hpp"
#include "spat/cost.hpp"
#include "spat/data.hpp"
#include "spat/model.hpp"
#include "spat/send.hpp"

namespace spat {

std::uint64_t splitmix64(std::uint64_t& state);

// Independent streams derived from the master seed.
struct SeedStreams {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t dropout = 0;

  static SeedStreams derive(std::uint64_t master);
};

struct TrainOptions {
  double lr = 3e-4;
  std::size_t epochs = 10;
  std::size_t patience = 5;  // 0: no early stopping, keep the last weights
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t shuffle_seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_mse;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
  std::optional<std::size_t> best_epoch;  // absent when no epoch improved on the start
  std::optional<double> best_val_mse;
  bool stopped_early = false;
};

// Trains in place with MSE loss, Adam and a cosine schedule, and leaves the
// model at its best validation weights (the starting weights count as epoch
// 0). Throws ContractError on empty training data and NumericError when the
// loss diverges.
TrainReport train(ForecasterModel& model, const WindowSet& train_windows,
                  const WindowSet& val_windows, const TrainOptions& options);

TrainOptions pretrain_options(const ExperimentConfig& cfg);
TrainOptions finetune_options(const ExperimentConfig& cfg);

SeriesDataset load_dataset(const DatasetConfig& cfg);
PreparedData load_prepared(const ExperimentConfig& cfg);

// Fresh model for the experiment with channels taken from the data.
ForecasterModel build_model(const ExperimentConfig& cfg, std::size_t channels);

ForecasterModel pretrain(const ExperimentConfig& cfg, const PreparedData& data,
                         TrainReport* report = nullptr);

// Scoring batches: chronological training batches, limited to
// `pruning.score_batches` when nonzero.
std::vector<ForecastBatch> scoring_batches(const ExperimentConfig& cfg, const PreparedData& data);

// Requires an unpruned model.
std::vector<SensitivityRecord> score(ForecasterModel& model, const ExperimentConfig& cfg,
                                     const PreparedData& data);

// Copy of `model` with the planned layers removed. Throws ContractError if a
// planned layer is already pruned.
ForecasterModel prune(const ForecasterModel& model, const PruningPlan& plan);

// Fresh optimizer state; budget and rate from the finetune settings.
ForecasterModel finetune(const ForecasterModel& pruned, const ExperimentConfig& cfg,
                         const PreparedData& data, TrainReport* report = nullptr);

Metrics evaluate_split(ForecasterModel& model, const WindowSet& windows, std::size_t batch_size);

// Frozen evaluation on the target's test split with the target's own
// statistics. Throws ConfigError when a variate-token model meets a different
// channel count or the window sizes disagree.
Metrics zero_shot_eval(const ForecasterModel& model, const PreparedData& target,
                       std::size_t batch_size);

enum class Stage { initial, pretrained, scored, pruned, finetuned };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& s);

struct StageRecord {
  Stage stage = Stage::initial;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string checkpoint;  // relative to the run directory; empty if none

  bool operator==(const StageRecord&) const = default;
};

// Candidate set C and removed set S over layer indices 0..N-1.
class PipelineState {
 public:
  explicit PipelineState(std::size_t layers = 0);

  Stage stage() const { return stage_; }
  const std::set<std::size_t>& candidates() const { return candidates_; }
  const std::set<std::size_t>& removed() const { return removed_; }
  const std::vector<StageRecord>& history() const { return history_; }

  // Throws ContractError unless `next` comes strictly after the current stage
  // (re-entering `scored` or `pruned` from `pruned` is allowed for iterative
  // pruning).
  void advance(Stage next, const std::string& config_hash, std::uint64_t seed,
               const std::string& checkpoint = "");
  // Moves a layer from C to S. Throws ContractError if it is not a candidate.
  void remove(std::size_t layer);
  bool partition_holds() const;

  nlohmann::json to_json() const;
  static PipelineState from_json(const nlohmann::json& j);

  bool operator==(const PipelineState&) const = default;

 private:
  std::size_t layers_ = 0;
  Stage stage_ = Stage::initial;
  std::set<std::size_t> candidates_;
  std::set<std::size_t> removed_;
  std::vector<StageRecord> history_;
};

struct LedgerRow {
  std::string stage;
  std::string dataset;
  std::size_t horizon = 0;
  Metrics metrics;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::optional<double> wall_time_s;  // written as "-" when absent
};

inline constexpr const char* kLedgerHeader = "stage,dataset,horizon,mse,mae,flops,params,wall_time_s";
void write_ledger_row(std::ostream& out, const LedgerRow& row);
// Appends to `path`, writing the header first when the file is new or empty.
void append_ledger(const std::filesystem::path& path, const LedgerRow& row);

struct RunResult {
  PipelineState state;
  std::vector<LayerScore> scores;
  std::vector<PruningPlan> plans;  // one per removal round; a single plan unless iterative
  std::vector<std::size_t> removed;
  Metrics original;
  Metrics pruned_before_finetune;
  Metrics finetuned;
  CostReport original_cost;
  CostReport pruned_cost;
  std::filesystem::path run_dir;
};

// Full run. Artifacts in `run_dir`: config.json, pretrained.ckpt, pruned.ckpt,
// finetuned.ckpt, send_report.csv, metrics.csv, cost_original.txt,
// cost_pruned.txt, state.json.
RunResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

// Prune + finetune + evaluate starting from a pretrained model, writing the
// same artifacts except pretrained.ckpt. Used by run_pipeline and by sweeps.
RunResult run_from_pretrained(const ExperimentConfig& cfg, const ForecasterModel& pretrained,
                              const PreparedData& data, const std::filesystem::path& run_dir,
                              std::optional<double> pretrain_seconds = std::nullopt);

struct SweepRow {
  double alpha = 0.0;
  std::size_t k = 0;
  std::vector<std::size_t> removed;
  Metrics metrics;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

// Pretrains once, then runs an isolated prune/finetune worker per alpha in
// `run_dir/alpha_<value>`. Writes run_dir/sweep.csv.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::vector<double>& alphas,
                                const std::filesystem::path& run_dir);

}  // namespace spat
