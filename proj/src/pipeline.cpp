#include "spat/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spat/checkpoint.hpp"
#include "spat/errors.hpp"
#include "spat/optim.hpp"

namespace spat {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SeedStreams SeedStreams::derive(std::uint64_t master) {
  std::uint64_t s = master;
  SeedStreams out;
  out.data = splitmix64(s);
  out.init = splitmix64(s);
  out.dropout = splitmix64(s);
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t epoch_seed(std::uint64_t base, std::size_t epoch) {
  std::uint64_t s = base ^ (0xd1b54a32d192ed03ULL * (epoch + 1));
  return splitmix64(s);
}

std::vector<std::vector<double>> snapshot(const ForecasterModel& model) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : model.parameters()) out.push_back(t.to_vector());
  return out;
}

void restore(ForecasterModel& model, const std::vector<std::vector<double>>& saved) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].second.mutable_data();
    std::copy(saved[i].begin(), saved[i].end(), dst.begin());
  }
}

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json stage_metadata(const ExperimentConfig& cfg, const char* stage) {
  return {{"stage", stage},
          {"config_hash", hex(config_hash(cfg))},
          {"seed", cfg.seed},
          {"dataset", cfg.dataset.name}};
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

// Re-raises a forward-pass NumericError with the training position attached.
template <typename F>
auto at_position(std::size_t epoch, std::size_t step, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError("train: diverged at epoch " + std::to_string(epoch) + ", step " +
                       std::to_string(step) + ": " + e.what());
  }
}

}  // namespace

TrainReport train(ForecasterModel& model, const WindowSet& train_windows,
                  const WindowSet& val_windows, const TrainOptions& options) {
  if (train_windows.empty()) throw ContractError("train: no training windows");
  if (options.batch_size == 0) throw ConfigError("optim.batch_size: must be at least 1");
  TrainReport report;
  if (options.epochs == 0) return report;

  const bool validate = options.patience > 0 && !val_windows.empty();
  std::vector<ForecastBatch> val_batches;
  if (validate) val_batches = make_batches(val_windows, options.batch_size);

  const std::size_t per_epoch =
      (train_windows.size() + options.batch_size - 1) / options.batch_size;
  AdamConfig adam_cfg{options.lr, options.beta1, options.beta2, options.eps,
                      per_epoch * options.epochs};
  Adam adam(model.parameters(), adam_cfg);

  std::vector<std::vector<double>> best;
  std::size_t since_best = 0;
  if (validate) {
    report.best_val_mse = at_position(0, 0, [&] { return evaluate(model, val_batches).mse; });
    best = snapshot(model);
  }

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    model.set_training(true);
    const auto order = batch_indices(train_windows.size(), options.batch_size,
                                     epoch_seed(options.shuffle_seed, epoch));
    double loss_sum = 0.0;
    for (const auto& idx : order) {
      const ForecastBatch batch = gather(train_windows, idx);
      adam.zero_grad();
      Tape tape;
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor loss = at_position(epoch, adam.steps() + 1, [&] {
          return mse_loss(model.forecast(batch.inputs), batch.targets);
        });
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(adam.steps() + 1));
        }
        tape.backward(loss);
      }
      adam.step();
      loss_sum += loss_value;
    }
    report.steps = adam.steps();
    model.set_training(false);

    EpochLog log{epoch, loss_sum / static_cast<double>(order.size()), std::nullopt};
    if (validate) {
      const double v =
          at_position(epoch, adam.steps(), [&] { return evaluate(model, val_batches).mse; });
      log.val_mse = v;
      if (v < *report.best_val_mse) {
        report.best_val_mse = v;
        report.best_epoch = epoch;
        best = snapshot(model);
        since_best = 0;
      } else if (++since_best >= options.patience) {
        report.epochs.push_back(log);
        report.stopped_early = true;
        break;
      }
    }
    report.epochs.push_back(log);
  }
  adam.zero_grad();
  if (validate) restore(model, best);
  model.set_training(false);
  return report;
}

TrainOptions pretrain_options(const ExperimentConfig& cfg) {
  const auto streams = SeedStreams::derive(cfg.seed);
  TrainOptions o;
  o.lr = cfg.optim.lr;
  o.epochs = cfg.optim.epochs;
  o.patience = cfg.optim.patience;
  o.batch_size = cfg.optim.batch_size;
  o.beta1 = cfg.optim.beta1;
  o.beta2 = cfg.optim.beta2;
  o.eps = cfg.optim.eps;
  o.shuffle_seed = streams.data;
  return o;
}

TrainOptions finetune_options(const ExperimentConfig& cfg) {
  TrainOptions o = pretrain_options(cfg);
  o.lr = cfg.optim.effective_finetune_lr();
  o.epochs = cfg.optim.effective_finetune_epochs();
  return o;
}

SeriesDataset load_dataset(const DatasetConfig& cfg) {
  if (cfg.path.empty()) return make_synthetic(cfg.synthetic.value_or(SyntheticSpec{}), cfg.name);
  if (!fs::exists(cfg.path)) throw ConfigError("dataset.path: no such file '" + cfg.path + "'");
  CsvSchema schema;
  schema.date = cfg.date;
  return load_csv(cfg.path, schema, cfg.name);
}

PreparedData load_prepared(const ExperimentConfig& cfg) {
  cfg.validate();
  return prepare(load_dataset(cfg.dataset), cfg.dataset.split, cfg.window(),
                 cfg.optim.patience == 0);
}

ForecasterModel build_model(const ExperimentConfig& cfg, std::size_t channels) {
  ModelConfig mc = cfg.model;
  mc.channels = channels;
  ForecasterModel model(mc, SeedStreams::derive(cfg.seed).init);
  model.seed_dropout(SeedStreams::derive(cfg.seed).dropout);
  return model;
}

ForecasterModel pretrain(const ExperimentConfig& cfg, const PreparedData& data,
                         TrainReport* report) {
  ForecasterModel model = build_model(cfg, data.dataset.channels);
  auto r = train(model, data.train, data.val, pretrain_options(cfg));
  if (report) *report = std::move(r);
  return model;
}

std::vector<ForecastBatch> scoring_batches(const ExperimentConfig& cfg, const PreparedData& data) {
  if (data.train.empty()) throw ContractError("score: no training windows");
  auto batches = make_batches(data.train, cfg.optim.batch_size);
  if (cfg.pruning.score_batches > 0 && batches.size() > cfg.pruning.score_batches) {
    batches.resize(cfg.pruning.score_batches);
  }
  return batches;
}

std::vector<SensitivityRecord> score(ForecasterModel& model, const ExperimentConfig& cfg,
                                     const PreparedData& data) {
  if (!model.pruned_layers().empty()) {
    throw ContractError(
        "score: the model already has pruned attention layers; score the unpruned checkpoint");
  }
  const auto batches = scoring_batches(cfg, data);
  return compute_sensitivity(model, batches);
}

ForecasterModel prune(const ForecasterModel& model, const PruningPlan& plan) {
  ForecasterModel out = model.clone();
  for (std::size_t layer : plan.pruned) out.prune_layer(layer);
  return out;
}

ForecasterModel finetune(const ForecasterModel& pruned, const ExperimentConfig& cfg,
                         const PreparedData& data, TrainReport* report) {
  ForecasterModel model = pruned.clone();
  std::uint64_t s = SeedStreams::derive(cfg.seed).dropout;
  model.seed_dropout(splitmix64(s));
  auto r = train(model, data.train, data.val, finetune_options(cfg));
  if (report) *report = std::move(r);
  return model;
}

Metrics evaluate_split(ForecasterModel& model, const WindowSet& windows, std::size_t batch_size) {
  if (windows.empty()) throw ContractError("evaluate: no windows in the evaluation split");
  const auto batches = make_batches(windows, batch_size);
  return evaluate(model, batches);
}

Metrics zero_shot_eval(const ForecasterModel& model, const PreparedData& target,
                       std::size_t batch_size) {
  const ModelConfig& mc = model.config();
  if (mc.mode == TokenMode::variate && target.dataset.channels != mc.channels) {
    throw ConfigError("zeroshot: variate-token model expects " + std::to_string(mc.channels) +
                      " channels, target '" + target.dataset.name + "' has " +
                      std::to_string(target.dataset.channels));
  }
  const WindowSpec& w = target.test.spec();
  if (w.lookback != mc.lookback || w.horizon != mc.horizon) {
    throw ConfigError("zeroshot: target windows (L=" + std::to_string(w.lookback) +
                      ", T=" + std::to_string(w.horizon) + ") do not match the model (L=" +
                      std::to_string(mc.lookback) + ", T=" + std::to_string(mc.horizon) + ")");
  }
  ForecasterModel frozen = model.clone();
  return evaluate_split(frozen, target.test, batch_size);
}

// ---- state --------------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::initial: return "initial";
    case Stage::pretrained: return "pretrained";
    case Stage::scored: return "scored";
    case Stage::pruned: return "pruned";
    case Stage::finetuned: return "finetuned";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::initial, Stage::pretrained, Stage::scored, Stage::pruned,
                   Stage::finetuned}) {
    if (to_string(st) == s) return st;
  }
  throw ParseError("unknown stage '" + s + "'", 0, 0);
}

PipelineState::PipelineState(std::size_t layers) : layers_(layers) {
  for (std::size_t n = 0; n < layers; ++n) candidates_.insert(n);
}

void PipelineState::advance(Stage next, const std::string& config_hash, std::uint64_t seed,
                            const std::string& checkpoint) {
  const bool forward = static_cast<int>(next) > static_cast<int>(stage_);
  const bool iterate = stage_ == Stage::pruned && (next == Stage::scored || next == Stage::pruned);
  if (!forward && !iterate) {
    throw ContractError("pipeline: cannot move from stage " + to_string(stage_) + " to " +
                        to_string(next));
  }
  stage_ = next;
  history_.push_back({next, config_hash, seed, checkpoint});
}

void PipelineState::remove(std::size_t layer) {
  if (candidates_.erase(layer) == 0) {
    throw ContractError("pipeline: layer " + std::to_string(layer) + " is not a candidate");
  }
  removed_.insert(layer);
}

bool PipelineState::partition_holds() const {
  if (candidates_.size() + removed_.size() != layers_) return false;
  for (std::size_t n = 0; n < layers_; ++n) {
    if (candidates_.count(n) + removed_.count(n) != 1) return false;
  }
  return true;
}

json PipelineState::to_json() const {
  json history = json::array();
  for (const auto& r : history_) {
    history.push_back({{"stage", spat::to_string(r.stage)},
                       {"config_hash", r.config_hash},
                       {"seed", r.seed},
                       {"checkpoint", r.checkpoint}});
  }
  return {{"layers", layers_},
          {"stage", spat::to_string(stage_)},
          {"candidates", candidates_},
          {"removed", removed_},
          {"history", history}};
}

PipelineState PipelineState::from_json(const json& j) {
  try {
    PipelineState s(j.at("layers").get<std::size_t>());
    s.stage_ = parse_stage(j.at("stage").get<std::string>());
    s.candidates_ = j.at("candidates").get<std::set<std::size_t>>();
    s.removed_ = j.at("removed").get<std::set<std::size_t>>();
    for (const auto& r : j.at("history")) {
      s.history_.push_back({parse_stage(r.at("stage").get<std::string>()),
                            r.at("config_hash").get<std::string>(),
                            r.at("seed").get<std::uint64_t>(),
                            r.at("checkpoint").get<std::string>()});
    }
    if (!s.partition_holds()) throw ParseError("state: candidate/removed sets overlap", 0, 0);
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("state: ") + e.what(), 0, 0);
  }
}

// ---- ledger -------------------------------------------------------------

void write_ledger_row(std::ostream& out, const LedgerRow& row) {
  out << row.stage << ',' << row.dataset << ',' << row.horizon << ','
      << fmt_double(row.metrics.mse) << ',' << fmt_double(row.metrics.mae) << ',' << row.flops
      << ',' << row.params << ',';
  if (row.wall_time_s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", *row.wall_time_s);
    out << buf;
  } else {
    out << '-';
  }
  out << '\n';
}

void append_ledger(const fs::path& path, const LedgerRow& row) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  if (fresh) out << kLedgerHeader << '\n';
  write_ledger_row(out, row);
}

// ---- runs ---------------------------------------------------------------

RunResult run_from_pretrained(const ExperimentConfig& cfg, const ForecasterModel& pretrained,
                              const PreparedData& data, const fs::path& run_dir,
                              std::optional<double> pretrain_seconds) {
  fs::create_directories(run_dir);
  const std::string hash = hex(config_hash(cfg));
  const bool timed = cfg.record_wall_time;
  const std::size_t bs = cfg.optim.batch_size;
  const std::size_t channels = data.dataset.channels;
  const fs::path ledger = run_dir / "metrics.csv";
  if (fs::exists(ledger)) fs::remove(ledger);
  save_experiment((run_dir / "config.json").string(), cfg);

  RunResult result;
  result.run_dir = run_dir;
  result.state = PipelineState(pretrained.config().layers);
  result.state.advance(Stage::pretrained, hash, cfg.seed, "pretrained.ckpt");

  ForecasterModel original = pretrained.clone();
  result.original = evaluate_split(original, data.test, bs);
  result.original_cost = cost_report(original, channels);
  append_ledger(ledger, {"pretrained", data.dataset.name, cfg.model.horizon, result.original,
                         result.original_cost.flops_total, result.original_cost.params_total,
                         timed ? pretrain_seconds : std::nullopt});

  // Scoring and removal. One round removes K layers at once; the iterative
  // variant removes one layer per round and re-scores the survivors.
  auto t0 = Clock::now();
  ForecasterModel current = pretrained.clone();
  const std::size_t k_total = prune_count(cfg.pruning.alpha, pretrained.config().layers);
  while (result.removed.size() < k_total) {
    const auto records = compute_sensitivity(current, scoring_batches(cfg, data));
    const auto scores = scores_of(records);
    if (result.scores.empty()) result.scores = scores;
    result.state.advance(Stage::scored, hash, cfg.seed);

    PruningPlan plan = build_plan(scores, cfg.pruning.alpha);
    if (cfg.pruning.iterative) {
      plan.k = 1;
      plan.pruned.assign(plan.ranked.end() - 1, plan.ranked.end());
    }
    current = prune(current, plan);
    for (std::size_t layer : plan.pruned) {
      result.state.remove(layer);
      result.removed.push_back(layer);
    }
    result.plans.push_back(std::move(plan));
    result.state.advance(Stage::pruned, hash, cfg.seed, "pruned.ckpt");
  }
  const double prune_seconds = seconds_since(t0);

  {
    std::ofstream out(run_dir / "send_report.csv", std::ios::binary);
    write_send_report(out, result.plans);
  }
  save_checkpoint((run_dir / "pruned.ckpt").string(), current,
                  stage_metadata(cfg, "pruned"));
  result.pruned_cost = cost_report(current, channels);
  result.pruned_before_finetune = evaluate_split(current, data.test, bs);
  append_ledger(ledger, {"pruned", data.dataset.name, cfg.model.horizon,
                         result.pruned_before_finetune, result.pruned_cost.flops_total,
                         result.pruned_cost.params_total,
                         timed ? std::optional<double>(prune_seconds) : std::nullopt});

  t0 = Clock::now();
  ForecasterModel tuned = finetune(current, cfg, data);
  const double finetune_seconds = seconds_since(t0);
  result.state.advance(Stage::finetuned, hash, cfg.seed, "finetuned.ckpt");
  save_checkpoint((run_dir / "finetuned.ckpt").string(), tuned,
                  stage_metadata(cfg, "finetuned"));
  result.finetuned = evaluate_split(tuned, data.test, bs);
  append_ledger(ledger, {"finetuned", data.dataset.name, cfg.model.horizon, result.finetuned,
                         result.pruned_cost.flops_total, result.pruned_cost.params_total,
                         timed ? std::optional<double>(finetune_seconds) : std::nullopt});

  {
    std::ostringstream os;
    write_cost_report(os, result.original_cost);
    write_file(run_dir / "cost_original.txt", os.str());
  }
  {
    std::ostringstream os;
    write_cost_report(os, result.pruned_cost, &result.original_cost);
    write_file(run_dir / "cost_pruned.txt", os.str());
  }
  write_file(run_dir / "state.json", result.state.to_json().dump(2) + "\n");
  return result;
}

RunResult run_pipeline(const ExperimentConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  const PreparedData data = load_prepared(cfg);
  fs::create_directories(run_dir);
  const auto t0 = Clock::now();
  ForecasterModel model = pretrain(cfg, data);
  const double seconds = seconds_since(t0);
  save_checkpoint((run_dir / "pretrained.ckpt").string(), model,
                  stage_metadata(cfg, "pretrained"));
  return run_from_pretrained(cfg, model, data, run_dir, seconds);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::vector<double>& alphas,
                                const fs::path& run_dir) {
  if (alphas.empty()) throw ConfigError("sweep: no alpha values given");
  for (double a : alphas) {
    ExperimentConfig probe = cfg;
    probe.pruning.alpha = a;
    probe.validate();
  }
  const PreparedData data = load_prepared(cfg);
  fs::create_directories(run_dir);
  const auto t0 = Clock::now();
  const ForecasterModel model = pretrain(cfg, data);
  const double seconds = seconds_since(t0);
  save_checkpoint((run_dir / "pretrained.ckpt").string(), model,
                  stage_metadata(cfg, "pretrained"));

  std::vector<SweepRow> rows;
  for (double a : alphas) {
    ExperimentConfig worker = cfg;
    worker.pruning.alpha = a;
    const fs::path dir = run_dir / ("alpha_" + fmt_double(a));
    worker.run_dir = dir.string();
    const RunResult r = run_from_pretrained(worker, model, data, dir, seconds);
    rows.push_back({a, r.removed.size(), r.removed, r.finetuned, r.pruned_cost.flops_total,
                    r.pruned_cost.params_total});
  }

  std::ofstream out(run_dir / "sweep.csv", std::ios::binary);
  out << "alpha,k,removed,mse,mae,flops,params\n";
  for (const auto& r : rows) {
    std::string removed;
    for (std::size_t i = 0; i < r.removed.size(); ++i) {
      if (i) removed += ' ';
      removed += std::to_string(r.removed[i]);
    }
    out << fmt_double(r.alpha) << ',' << r.k << ',' << removed << ','
        << fmt_double(r.metrics.mse) << ',' << fmt_double(r.metrics.mae) << ',' << r.flops << ','
        << r.params << '\n';
  }
  return rows;
}

}  // namespace spat
