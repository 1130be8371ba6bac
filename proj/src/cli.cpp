#include "spat/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "spat/checkpoint.hpp"
#include "spat/config.hpp"
#include "spat/cost.hpp"
#include "spat/errors.hpp"
#include "spat/pipeline.hpp"
#include "spat/send.hpp"

namespace spat::cli {

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  std::optional<std::string> data;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> finetune_epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> patience;
  std::optional<double> lr;
  std::optional<double> alpha;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "Experiment config (JSON)");
  app->add_option("--seed", o.seed, "Master seed");
  app->add_option("--run-dir", o.run_dir, "Run directory");
  app->add_option("--data", o.data, "Dataset CSV (replaces the configured dataset)");
  app->add_option("--epochs", o.epochs, "Pretrain epoch budget");
  app->add_option("--finetune-epochs", o.finetune_epochs, "Finetune epoch budget");
  app->add_option("--batch-size", o.batch_size, "Batch size");
  app->add_option("--patience", o.patience, "Early-stopping patience (0 disables)");
  app->add_option("--lr", o.lr, "Learning rate");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config);
    cfg = load_experiment(o.config);
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.run_dir) cfg.run_dir = *o.run_dir;
  if (o.data) {
    cfg.dataset.path = *o.data;
    cfg.dataset.name = fs::path(*o.data).stem().string();
  }
  if (o.epochs) cfg.optim.epochs = *o.epochs;
  if (o.finetune_epochs) cfg.optim.finetune_epochs = *o.finetune_epochs;
  if (o.batch_size) cfg.optim.batch_size = *o.batch_size;
  if (o.patience) cfg.optim.patience = *o.patience;
  if (o.lr) cfg.optim.lr = *o.lr;
  if (o.alpha) cfg.pruning.alpha = *o.alpha;
  if (cfg.dataset.path.empty() && !cfg.dataset.synthetic) cfg.dataset.synthetic = SyntheticSpec{};
  cfg.validate();
  return cfg;
}

fs::path run_root(const ExperimentConfig& cfg) {
  fs::path dir(cfg.run_dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv("SPAT_RUN_ROOT"); root && *root) dir = fs::path(root) / dir;
  }
  return dir;
}

Checkpoint open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

// The checkpoint fixes the architecture and window sizes.
ExperimentConfig adopt(ExperimentConfig cfg, const ForecasterModel& model) {
  cfg.model = model.config();
  return cfg;
}

std::string checkpoint_or(const std::string& given, const fs::path& dir, const char* name) {
  return given.empty() ? (dir / name).string() : given;
}

std::string hash_hex(const ExperimentConfig& cfg) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  return buf;
}

nlohmann::json stage_meta(const ExperimentConfig& cfg, const char* stage) {
  return {{"stage", stage},
          {"config_hash", hash_hex(cfg)},
          {"seed", cfg.seed},
          {"dataset", cfg.dataset.name}};
}

// Best-effort stage bookkeeping for stage-by-stage use: a transition that
// does not follow the recorded one (e.g. scoring again at another alpha) is
// left out of state.json.
void record_stage(const fs::path& dir, const ExperimentConfig& cfg, Stage stage,
                  const std::vector<std::size_t>& removed = {}, const std::string& ckpt = "") {
  const fs::path path = dir / "state.json";
  PipelineState state(cfg.model.layers);
  if (stage != Stage::pretrained && fs::exists(path)) {
    std::ifstream in(path);
    try {
      state = PipelineState::from_json(nlohmann::json::parse(in));
    } catch (const std::exception&) {
      return;
    }
  }
  try {
    for (std::size_t layer : removed) state.remove(layer);
    state.advance(stage, hash_hex(cfg), cfg.seed, ckpt);
  } catch (const ContractError&) {
    return;
  }
  std::ofstream(path) << state.to_json().dump(2) << "\n";
}

void print_metrics(std::ostream& out, const std::string& label, const Metrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s mse %.6f  mae %.6f\n", label.c_str(), m.mse, m.mae);
  out << buf;
}

void print_scores(std::ostream& out, const std::vector<LayerScore>& scores) {
  out << "layer  send\n";
  for (const auto& s : scores) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%5zu  %.6g\n", s.layer, s.send);
    out << buf;
  }
}

void print_plan(std::ostream& out, const PruningPlan& plan) {
  out << "alpha " << plan.alpha << ": K=" << plan.k << ", ranked [";
  for (std::size_t i = 0; i < plan.ranked.size(); ++i) out << (i ? " " : "") << plan.ranked[i];
  out << "], pruned [";
  for (std::size_t i = 0; i < plan.pruned.size(); ++i) out << (i ? " " : "") << plan.pruned[i];
  out << "]\n";
}

int cmd_run(const Overrides& o, std::ostream& out) {
  ExperimentConfig cfg = resolve(o);
  const fs::path dir = run_root(cfg);
  const RunResult r = run_pipeline(cfg, dir);
  print_scores(out, r.scores);
  for (const auto& p : r.plans) print_plan(out, p);
  print_metrics(out, "pretrained", r.original);
  print_metrics(out, "pruned", r.pruned_before_finetune);
  print_metrics(out, "finetuned", r.finetuned);
  char buf[200];
  std::snprintf(buf, sizeof buf, "flops %llu -> %llu (-%.3f%%), params %llu -> %llu (-%.3f%%)\n",
                static_cast<unsigned long long>(r.original_cost.flops_total),
                static_cast<unsigned long long>(r.pruned_cost.flops_total),
                reduction_percent(static_cast<double>(r.original_cost.flops_total),
                                  static_cast<double>(r.pruned_cost.flops_total)),
                static_cast<unsigned long long>(r.original_cost.params_total),
                static_cast<unsigned long long>(r.pruned_cost.params_total),
                reduction_percent(static_cast<double>(r.original_cost.params_total),
                                  static_cast<double>(r.pruned_cost.params_total)));
  out << buf << "artifacts in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const Overrides& o, std::ostream& out) {
  ExperimentConfig cfg = resolve(o);
  const fs::path dir = run_root(cfg);
  const PreparedData data = load_prepared(cfg);
  fs::create_directories(dir);
  save_experiment((dir / "config.json").string(), cfg);
  TrainReport report;
  ForecasterModel model = pretrain(cfg, data, &report);
  save_checkpoint((dir / "pretrained.ckpt").string(), model, stage_meta(cfg, "pretrained"));
  const Metrics m = evaluate_split(model, data.test, cfg.optim.batch_size);
  const CostReport cost = cost_report(model, data.dataset.channels);
  append_ledger(dir / "metrics.csv", {"pretrained", data.dataset.name, cfg.model.horizon, m,
                                      cost.flops_total, cost.params_total, std::nullopt});
  record_stage(dir, adopt(cfg, model), Stage::pretrained, {}, "pretrained.ckpt");
  out << "epochs run " << report.epochs.size() << ", steps " << report.steps << "\n";
  print_metrics(out, "pretrained", m);
  out << "checkpoint " << (dir / "pretrained.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_score(const Overrides& o, const std::string& ckpt_arg, const std::vector<double>& alphas,
              const std::string& report_path, std::ostream& out) {
  ExperimentConfig base = resolve(o);
  const fs::path dir = run_root(base);
  Checkpoint ckpt = open_checkpoint(checkpoint_or(ckpt_arg, dir, "pretrained.ckpt"));
  if (!ckpt.model.pruned_layers().empty()) {
    throw ContractError(
        "score: checkpoint has pruned attention layers; SEND ranks the layers of an unpruned "
        "model, so score the pretrained checkpoint instead");
  }
  const ExperimentConfig cfg = adopt(base, ckpt.model);
  const PreparedData data = load_prepared(cfg);
  const auto records = score(ckpt.model, cfg, data);
  const auto scores = scores_of(records);
  std::vector<PruningPlan> plans;
  for (double a : alphas.empty() ? std::vector<double>{cfg.pruning.alpha} : alphas) {
    plans.push_back(build_plan(scores, a));
  }
  print_scores(out, scores);
  for (const auto& p : plans) print_plan(out, p);
  const fs::path path = report_path.empty() ? dir / "send_report.csv" : fs::path(report_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw ConfigError("cannot write '" + path.string() + "'");
  write_send_report(file, plans);
  record_stage(dir, cfg, Stage::scored);
  out << "report " << path.string() << "\n";
  return kExitOk;
}

int cmd_prune(const Overrides& o, const std::string& ckpt_arg, std::ostream& out) {
  ExperimentConfig base = resolve(o);
  const fs::path dir = run_root(base);
  Checkpoint ckpt = open_checkpoint(checkpoint_or(ckpt_arg, dir, "pretrained.ckpt"));
  const ExperimentConfig cfg = adopt(base, ckpt.model);
  const PreparedData data = load_prepared(cfg);
  const auto scores = scores_of(score(ckpt.model, cfg, data));
  const PruningPlan plan = build_plan(scores, cfg.pruning.alpha);
  ForecasterModel pruned = prune(ckpt.model, plan);
  fs::create_directories(dir);
  save_checkpoint((dir / "pruned.ckpt").string(), pruned, stage_meta(cfg, "pruned"));
  const Metrics m = evaluate_split(pruned, data.test, cfg.optim.batch_size);
  const CostReport cost = cost_report(pruned, data.dataset.channels);
  append_ledger(dir / "metrics.csv", {"pruned", data.dataset.name, cfg.model.horizon, m,
                                      cost.flops_total, cost.params_total, std::nullopt});
  record_stage(dir, cfg, Stage::scored);
  record_stage(dir, cfg, Stage::pruned, plan.pruned, "pruned.ckpt");
  print_plan(out, plan);
  print_metrics(out, "pruned", m);
  out << "checkpoint " << (dir / "pruned.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_finetune(const Overrides& o, const std::string& ckpt_arg, std::ostream& out) {
  ExperimentConfig base = resolve(o);
  const fs::path dir = run_root(base);
  Checkpoint ckpt = open_checkpoint(checkpoint_or(ckpt_arg, dir, "pruned.ckpt"));
  const ExperimentConfig cfg = adopt(base, ckpt.model);
  const PreparedData data = load_prepared(cfg);
  TrainReport report;
  ForecasterModel tuned = finetune(ckpt.model, cfg, data, &report);
  fs::create_directories(dir);
  save_checkpoint((dir / "finetuned.ckpt").string(), tuned, stage_meta(cfg, "finetuned"));
  const Metrics m = evaluate_split(tuned, data.test, cfg.optim.batch_size);
  const CostReport cost = cost_report(tuned, data.dataset.channels);
  append_ledger(dir / "metrics.csv", {"finetuned", data.dataset.name, cfg.model.horizon, m,
                                      cost.flops_total, cost.params_total, std::nullopt});
  record_stage(dir, cfg, Stage::finetuned, {}, "finetuned.ckpt");
  out << "epochs run " << report.epochs.size() << ", steps " << report.steps << "\n";
  print_metrics(out, "finetuned", m);
  out << "checkpoint " << (dir / "finetuned.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const Overrides& o, const std::vector<std::string>& ckpts, bool csv,
             std::ostream& out) {
  ExperimentConfig base = resolve(o);
  const fs::path dir = run_root(base);
  std::vector<std::string> paths = ckpts;
  if (paths.empty()) paths.push_back((dir / "finetuned.ckpt").string());

  std::vector<HorizonRow> rows;
  for (const auto& path : paths) {
    if (!fs::exists(path)) {
      // A missing horizon checkpoint becomes an absent row, unless it is the only one.
      if (paths.size() == 1) throw ConfigError("checkpoint not found: " + path);
      rows.push_back({});
      continue;
    }
    Checkpoint ckpt = load_checkpoint(path);
    const ExperimentConfig cfg = adopt(base, ckpt.model);
    const PreparedData data = load_prepared(cfg);
    const Metrics m = evaluate_split(ckpt.model, data.test, cfg.optim.batch_size);
    const CostReport cost = cost_report(ckpt.model, data.dataset.channels);
    rows.push_back({cfg.model.horizon, m, cost.flops_total, cost.params_total});
    if (fs::exists(dir)) {
      append_ledger(dir / "metrics.csv", {"eval", data.dataset.name, cfg.model.horizon, m,
                                          cost.flops_total, cost.params_total, std::nullopt});
    }
  }
  const HorizonReport report = horizon_report(std::move(rows));
  if (csv) {
    write_horizon_csv(out, report);
  } else {
    write_horizon_text(out, report);
  }
  return kExitOk;
}

int cmd_zeroshot(const Overrides& o, const std::string& ckpt_arg, const std::string& target,
                 const std::string& target_config, const std::string& source_name,
                 std::ostream& out) {
  ExperimentConfig base = resolve(o);
  const fs::path dir = run_root(base);
  if (ckpt_arg.empty()) throw ConfigError("zeroshot: --checkpoint is required");
  Checkpoint ckpt = open_checkpoint(ckpt_arg);

  ExperimentConfig tcfg = base;
  if (!target_config.empty()) {
    if (!fs::exists(target_config)) throw ConfigError("config file not found: " + target_config);
    tcfg = load_experiment(target_config);
  }
  if (!target.empty()) {
    if (!fs::exists(target)) throw ConfigError("zeroshot: target dataset not found: " + target);
    tcfg.dataset.path = target;
    tcfg.dataset.name = fs::path(target).stem().string();
  }
  if (tcfg.dataset.path.empty() && !tcfg.dataset.synthetic) tcfg.dataset.synthetic = SyntheticSpec{};
  // Target statistics come from the target's own training split.
  tcfg = adopt(tcfg, ckpt.model);
  const PreparedData data = load_prepared(tcfg);
  const Metrics m = zero_shot_eval(ckpt.model, data, base.optim.batch_size);

  std::string source = source_name;
  if (source.empty()) source = ckpt.metadata.value("dataset", base.dataset.name);
  const std::string label = source + "→" + data.dataset.name;
  const CostReport cost = cost_report(ckpt.model, data.dataset.channels);
  fs::create_directories(dir);
  append_ledger(dir / "metrics.csv", {"zeroshot", label, ckpt.model.config().horizon, m,
                                      cost.flops_total, cost.params_total, std::nullopt});
  print_metrics(out, label, m);
  return kExitOk;
}

int cmd_sweep(const Overrides& o, const std::vector<double>& alphas, std::ostream& out) {
  ExperimentConfig cfg = resolve(o);
  const fs::path dir = run_root(cfg);
  const auto rows = run_sweep(cfg, alphas.empty() ? std::vector<double>{cfg.pruning.alpha} : alphas,
                              dir);
  out << "alpha  k  mse        mae        flops       params\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-5g  %zu  %.6f  %.6f  %-10llu  %llu\n", r.alpha, r.k,
                  r.metrics.mse, r.metrics.mae, static_cast<unsigned long long>(r.flops),
                  static_cast<unsigned long long>(r.params));
    out << buf;
  }
  out << "summary " << (dir / "sweep.csv").string() << "\n";
  return kExitOk;
}

int cmd_synth(const std::string& path, const SyntheticSpec& spec, std::ostream& out) {
  if (path.empty()) throw ConfigError("synth-data: --out is required");
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_csv(path, make_synthetic(spec, p.stem().string()));
  out << "wrote " << spec.length << " rows x " << spec.channels << " channels to " << path << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-layer pruning for transformer forecasters"};
  app.require_subcommand(1);

  Overrides ov;
  std::string ckpt;
  std::vector<std::string> ckpts;
  std::vector<double> alphas;
  std::string report_path, target, target_config, source_name, synth_out;
  bool csv = false;
  SyntheticSpec synth;

  auto* run_cmd = app.add_subcommand("run", "Pretrain, score, prune, finetune and evaluate");
  add_common(run_cmd, ov);
  run_cmd->add_option("--alpha", ov.alpha, "Pruning ratio in (0, 1)");

  auto* pre = app.add_subcommand("pretrain", "Train the full model");
  add_common(pre, ov);

  auto* sc = app.add_subcommand("score", "Per-layer SEND scores and pruning plans");
  add_common(sc, ov);
  sc->add_option("--checkpoint", ckpt, "Unpruned checkpoint (default: <run>/pretrained.ckpt)");
  sc->add_option("--alpha", alphas, "Pruning ratio; repeat for several plans");
  sc->add_option("--report", report_path, "Report path (default: <run>/send_report.csv)");

  auto* pr = app.add_subcommand("prune", "Remove the lowest-SEND attention layers");
  add_common(pr, ov);
  pr->add_option("--checkpoint", ckpt, "Unpruned checkpoint (default: <run>/pretrained.ckpt)");
  pr->add_option("--alpha", ov.alpha, "Pruning ratio in (0, 1)");

  auto* ft = app.add_subcommand("finetune", "Finetune a pruned model");
  add_common(ft, ov);
  ft->add_option("--checkpoint", ckpt, "Checkpoint (default: <run>/pruned.ckpt)");

  auto* ev = app.add_subcommand("eval", "Test metrics; several checkpoints give a horizon table");
  add_common(ev, ov);
  ev->add_option("--checkpoint", ckpts, "Checkpoint; repeat once per horizon");
  ev->add_flag("--csv", csv, "CSV instead of aligned text");

  auto* zs = app.add_subcommand("zeroshot", "Evaluate a frozen checkpoint on another dataset");
  add_common(zs, ov);
  zs->add_option("--checkpoint", ckpt, "Trained checkpoint")->required();
  zs->add_option("--target", target, "Target dataset CSV");
  zs->add_option("--target-config", target_config, "Config whose dataset is the target");
  zs->add_option("--source-name", source_name, "Label of the training dataset");

  auto* sw = app.add_subcommand("sweep", "Pretrain once, then prune/finetune per alpha");
  add_common(sw, ov);
  sw->add_option("--alpha", alphas, "Pruning ratios")->required();

  auto* sy = app.add_subcommand("synth-data", "Write a synthetic dataset CSV");
  sy->add_option("--out", synth_out, "Output CSV")->required();
  sy->add_option("--channels", synth.channels, "Channels");
  sy->add_option("--length", synth.length, "Rows");
  sy->add_option("--periods", synth.periods, "Sinusoid periods");
  sy->add_option("--noise", synth.noise_std, "Gaussian noise std");
  sy->add_option("--trend", synth.trend, "Total linear drift");
  sy->add_option("--phase-shift", synth.phase_shift, "Phase added to every component");
  sy->add_option("--seed", synth.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run_cmd->parsed()) return cmd_run(ov, out);
    if (pre->parsed()) return cmd_pretrain(ov, out);
    if (sc->parsed()) return cmd_score(ov, ckpt, alphas, report_path, out);
    if (pr->parsed()) return cmd_prune(ov, ckpt, out);
    if (ft->parsed()) return cmd_finetune(ov, ckpt, out);
    if (ev->parsed()) return cmd_eval(ov, ckpts, csv, out);
    if (zs->parsed()) return cmd_zeroshot(ov, ckpt, target, target_config, source_name, out);
    if (sw->parsed()) return cmd_sweep(ov, alphas, out);
    if (sy->parsed()) return cmd_synth(synth_out, synth, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace spat::cli
