#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>

#include "spat/checkpoint.hpp"
#include "spat/errors.hpp"
#include "spat/optim.hpp"
#include "spat/pipeline.hpp"
#include "support.hpp"

using namespace spat;
using spat::test::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<std::vector<double>> weights_of(const ForecasterModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& [n, t] : m.state()) out.push_back(t.to_vector());
  return out;
}

struct Fixture {
  ExperimentConfig cfg;
  PreparedData data;
};

Fixture small(const fs::path& dir) {
  Fixture f;
  f.cfg = spat::test::small_experiment(dir);
  f.data = load_prepared(f.cfg);
  return f;
}

}  // namespace

TEST(Seeds, SplitMixMatchesReferenceSequence) {
  std::uint64_t s = 1234567;
  EXPECT_EQ(splitmix64(s), 6457827717110365317ull);
  EXPECT_EQ(splitmix64(s), 3203168211198807973ull);
  const auto a = SeedStreams::derive(5);
  const auto b = SeedStreams::derive(5);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(a.data, a.init);
  EXPECT_NE(a.init, a.dropout);
  EXPECT_NE(SeedStreams::derive(6).init, a.init);
}

TEST(Adam, FirstStepsMatchHandComputation) {
  Tensor w = Tensor::from({2}, {1.0, -2.0}).set_requires_grad(true);
  Adam opt({{"w", w}}, AdamConfig{0.1, 0.9, 0.999, 1e-8, 4});
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (std::size_t t = 1; t <= 4; ++t) {
    opt.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(sum(mul(w, w)));  // grad 2w
    }
    const double lr = 0.1 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(t - 1) / 4.0));
    for (int i = 0; i < 2; ++i) {
      const double g = 2.0 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, double(t)));
      const double vh = v[i] / (1.0 - std::pow(0.999, double(t)));
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step();
    EXPECT_NEAR(w.data()[0], ref[0], 1e-14);
    EXPECT_NEAR(w.data()[1], ref[1], 1e-14);
  }
  EXPECT_EQ(opt.steps(), 4u);
  EXPECT_EQ(opt.current_lr(), 0.0);
}

TEST(Adam, CosineScheduleAndValidation) {
  EXPECT_EQ(cosine_lr(1.0, 0, 10), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 5, 10), 0.5, 1e-15);
  EXPECT_NEAR(cosine_lr(1.0, 10, 10), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(1.0, 99, 10), 0.0, 1e-15);
  EXPECT_THROW(Adam({}, AdamConfig{-1.0}), ConfigError);
  EXPECT_THROW(Adam({}, AdamConfig{0.1, 1.0}), ConfigError);
  EXPECT_THROW(Adam({}, AdamConfig{0.1, 0.9, 0.999, 0.0}), ConfigError);
}

TEST(Adam, SkipsParametersWithoutGradient) {
  Tensor a = Tensor::from({1}, {1.0}).set_requires_grad(true);
  Tensor b = Tensor::from({1}, {1.0}).set_requires_grad(true);
  Adam opt({{"a", a}, {"b", b}}, AdamConfig{0.1});
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(a, a)));
  }
  opt.step();
  EXPECT_NE(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 1.0);
  EXPECT_EQ(opt.first_moments()[1][0], 0.0);
}

TEST(Train, PretrainingLowersValidationError) {
  TempDir dir("pre");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  const double before = evaluate_split(m, f.data.val, 32).mse;
  TrainReport report;
  ForecasterModel trained = pretrain(f.cfg, f.data, &report);
  const double after = evaluate_split(trained, f.data.val, 32).mse;
  EXPECT_LT(after, before);
  ASSERT_TRUE(report.best_val_mse.has_value());
  EXPECT_EQ(*report.best_val_mse, after);
  EXPECT_GT(report.steps, 0u);
  EXPECT_FALSE(trained.training());
}

TEST(Train, ZeroEpochsAndZeroRateLeaveWeights) {
  TempDir dir("zero");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  const auto w0 = weights_of(m);
  TrainOptions o = pretrain_options(f.cfg);
  o.epochs = 0;
  const auto r0 = train(m, f.data.train, f.data.val, o);
  EXPECT_EQ(r0.steps, 0u);
  EXPECT_EQ(weights_of(m), w0);
  o.epochs = 2;
  o.lr = 0.0;
  o.patience = 0;
  const auto r1 = train(m, f.data.train, f.data.val, o);
  EXPECT_GT(r1.steps, 0u);
  EXPECT_EQ(weights_of(m), w0);
}

TEST(Train, EarlyStoppingRestoresBestWeights) {
  TempDir dir("es");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  TrainOptions o = pretrain_options(f.cfg);
  o.lr = 0.05;
  o.epochs = 6;
  o.patience = 1;
  const auto w0 = weights_of(m);
  const auto before = evaluate_split(m, f.data.val, o.batch_size).mse;
  const TrainReport r = train(m, f.data.train, f.data.val, o);
  const auto after = evaluate_split(m, f.data.val, o.batch_size).mse;
  ASSERT_TRUE(r.best_val_mse.has_value());
  EXPECT_EQ(after, *r.best_val_mse);
  EXPECT_LE(after, before);
  double best_logged = before;
  for (const auto& e : r.epochs) best_logged = std::min(best_logged, *e.val_mse);
  EXPECT_EQ(after, best_logged);
  if (!r.best_epoch) EXPECT_EQ(weights_of(m), w0);
  if (r.stopped_early) EXPECT_LT(r.epochs.size(), 6u);
}

TEST(Train, DeterministicForFixedSeed) {
  TempDir dir("det");
  auto f = small(dir.path());
  const auto a = pretrain(f.cfg, f.data);
  const auto b = pretrain(f.cfg, f.data);
  EXPECT_EQ(weights_of(a), weights_of(b));
  f.cfg.seed = 12;
  EXPECT_NE(weights_of(pretrain(f.cfg, f.data)), weights_of(a));
}

TEST(Train, DivergenceRaisesNumericError) {
  TempDir dir("nan");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  for (double& v : m.head().weight.mutable_data()) v = std::nan("");
  TrainOptions o = pretrain_options(f.cfg);
  try {
    train(m, f.data.train, f.data.val, o);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Train, EmptyTrainingDataIsContractError) {
  TempDir dir("empty");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  EXPECT_THROW(train(m, WindowSet{}, f.data.val, pretrain_options(f.cfg)), ContractError);
  EXPECT_THROW(evaluate_split(m, WindowSet{}, 8), ContractError);
}

TEST(Prune, RetainedWeightsBitwiseUnchanged) {
  TempDir dir("prune");
  auto f = small(dir.path());
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  const auto records = score(m, f.cfg, f.data);
  ASSERT_EQ(records.size(), 2u);
  const auto plan = build_plan(scores_of(records), 0.5);
  const ForecasterModel p = prune(m, plan);
  EXPECT_EQ(p.pruned_layers(), plan.pruned);
  const auto full = m.state();
  for (const auto& [name, t] : p.state()) {
    const auto it = std::find_if(full.begin(), full.end(),
                                 [&](const NamedTensor& x) { return x.first == name; });
    ASSERT_NE(it, full.end()) << name;
    EXPECT_EQ(it->second.to_vector(), t.to_vector()) << name;
    EXPECT_NE(it->second.data().data(), t.data().data()) << name;
  }
  EXPECT_EQ(m.parameter_count() - p.parameter_count(), 4u * 8 * 8 + 4 * 8);
  EXPECT_THROW(prune(p, plan), ContractError);
  ForecasterModel pruned_copy = p.clone();
  EXPECT_THROW(score(pruned_copy, f.cfg, f.data), ContractError);
}

TEST(ZeroShot, SelfTargetEqualsEvaluation) {
  TempDir dir("zs");
  auto f = small(dir.path());
  ForecasterModel m = pretrain(f.cfg, f.data);
  const auto w = weights_of(m);
  const Metrics z = zero_shot_eval(m, f.data, 32);
  EXPECT_EQ(z, evaluate_split(m, f.data.test, 32));
  EXPECT_EQ(weights_of(m), w);
}

TEST(ZeroShot, PhaseShiftedTargetRunsFrozen) {
  TempDir dir("zs2");
  auto f = small(dir.path());
  ForecasterModel m = pretrain(f.cfg, f.data);
  ExperimentConfig target_cfg = f.cfg;
  target_cfg.dataset.synthetic->phase_shift = 1.3;
  target_cfg.dataset.synthetic->seed = 99;
  target_cfg.dataset.synthetic->channels = 5;  // temporal tokens accept any channel count
  const PreparedData target = load_prepared(target_cfg);
  const auto w = weights_of(m);
  const Metrics shifted = zero_shot_eval(m, target, 32);
  EXPECT_TRUE(std::isfinite(shifted.mse));
  EXPECT_TRUE(std::isfinite(shifted.mae));
  EXPECT_EQ(weights_of(m), w);
  target_cfg.model.horizon = 4;
  EXPECT_THROW(zero_shot_eval(m, load_prepared(target_cfg), 32), ConfigError);
}

TEST(ZeroShot, VariateChannelMismatchIsConfigError) {
  TempDir dir("zs3");
  auto f = small(dir.path());
  f.cfg.model.mode = TokenMode::variate;
  f.data = load_prepared(f.cfg);
  ForecasterModel m = build_model(f.cfg, f.data.dataset.channels);
  ExperimentConfig other = f.cfg;
  other.dataset.synthetic->channels = 3;
  try {
    zero_shot_eval(m, load_prepared(other), 32);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }
}

TEST(State, PartitionAndTransitions) {
  PipelineState s(4);
  EXPECT_TRUE(s.partition_holds());
  EXPECT_EQ(s.candidates().size(), 4u);
  s.advance(Stage::pretrained, "h", 1, "pretrained.ckpt");
  EXPECT_THROW(s.advance(Stage::initial, "h", 1), ContractError);
  EXPECT_THROW(s.advance(Stage::pretrained, "h", 1), ContractError);
  s.advance(Stage::scored, "h", 1);
  s.remove(2);
  EXPECT_THROW(s.remove(2), ContractError);
  EXPECT_THROW(s.remove(7), ContractError);
  EXPECT_TRUE(s.partition_holds());
  EXPECT_EQ(s.removed(), (std::set<std::size_t>{2}));
  s.advance(Stage::pruned, "h", 1, "pruned.ckpt");
  s.advance(Stage::scored, "h", 1);
  s.remove(0);
  s.advance(Stage::pruned, "h", 1);
  s.advance(Stage::finetuned, "h", 1, "finetuned.ckpt");
  EXPECT_THROW(s.advance(Stage::scored, "h", 1), ContractError);
  EXPECT_EQ(s.candidates(), (std::set<std::size_t>{1, 3}));
  EXPECT_TRUE(s.partition_holds());
  EXPECT_EQ(PipelineState::from_json(s.to_json()), s);
  EXPECT_EQ(s.history().size(), 6u);
  EXPECT_EQ(parse_stage("pruned"), Stage::pruned);
  EXPECT_THROW(parse_stage("bogus"), ParseError);
}

TEST(Ledger, RowFormat) {
  std::ostringstream out;
  write_ledger_row(out, {"finetuned", "ETTh1", 96, {0.25, 0.5}, 1000, 20, std::nullopt});
  EXPECT_EQ(out.str(), "finetuned,ETTh1,96,0.25,0.5,1000,20,-\n");
  TempDir dir("ledger");
  append_ledger(dir / "m.csv", {"a", "d", 1, {1, 2}, 3, 4, 1.5});
  append_ledger(dir / "m.csv", {"b", "d", 1, {1, 2}, 3, 4, std::nullopt});
  EXPECT_EQ(spat::test::read_file(dir / "m.csv"),
            std::string(kLedgerHeader) + "\na,d,1,1,2,3,4,1.500\nb,d,1,1,2,3,4,-\n");
}

TEST(Run, FullPipelineWritesArtifacts) {
  TempDir dir("run");
  const ExperimentConfig cfg = spat::test::small_experiment(dir.path());
  const RunResult r = run_pipeline(cfg, dir.path());
  for (const char* name : {"config.json", "pretrained.ckpt", "pruned.ckpt", "finetuned.ckpt",
                           "send_report.csv", "metrics.csv", "cost_original.txt",
                           "cost_pruned.txt", "state.json"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  EXPECT_EQ(r.removed.size(), 1u);
  EXPECT_EQ(r.state.stage(), Stage::finetuned);
  EXPECT_TRUE(r.state.partition_holds());
  EXPECT_LT(r.pruned_cost.flops_total, r.original_cost.flops_total);
  EXPECT_LT(r.pruned_cost.params_total, r.original_cost.params_total);
  const Checkpoint fin = load_checkpoint((dir / "finetuned.ckpt").string());
  EXPECT_EQ(fin.model.pruned_layers(), r.removed);
  EXPECT_EQ(fin.metadata.at("stage"), "finetuned");
  const std::string ledger = spat::test::read_file(dir / "metrics.csv");
  EXPECT_EQ(ledger.rfind(kLedgerHeader, 0), 0u);
  EXPECT_NE(ledger.find("\npretrained,sine,8,"), std::string::npos);
  EXPECT_NE(ledger.find("\npruned,sine,8,"), std::string::npos);
  EXPECT_NE(ledger.find("\nfinetuned,sine,8,"), std::string::npos);
  ForecasterModel fm = fin.model.clone();
  const PreparedData data = load_prepared(cfg);
  EXPECT_EQ(evaluate_split(fm, data.test, cfg.optim.batch_size), r.finetuned);
}

TEST(Run, RepeatedRunsProduceIdenticalLedgers) {
  TempDir a("runa"), b("runb");
  const ExperimentConfig cfg = spat::test::small_experiment(a.path());
  run_pipeline(cfg, a.path());
  run_pipeline(cfg, b.path());
  EXPECT_EQ(spat::test::read_file(a / "metrics.csv"), spat::test::read_file(b / "metrics.csv"));
  EXPECT_EQ(spat::test::read_file(a / "finetuned.ckpt"),
            spat::test::read_file(b / "finetuned.ckpt"));
}

TEST(Run, IterativeModeRescoresAfterEachRemoval) {
  TempDir dir("iter");
  ExperimentConfig cfg = spat::test::small_experiment(dir.path());
  cfg.model.layers = 3;
  cfg.pruning.alpha = 0.6;
  cfg.pruning.iterative = true;
  const RunResult r = run_pipeline(cfg, dir.path());
  ASSERT_EQ(r.removed.size(), 2u);
  ASSERT_EQ(r.plans.size(), 2u);
  EXPECT_EQ(r.plans[0].scores.size(), 3u);
  EXPECT_EQ(r.plans[1].scores.size(), 2u);
  for (const auto& s : r.plans[1].scores) EXPECT_NE(s.layer, r.removed[0]);
  EXPECT_TRUE(r.state.partition_holds());
  EXPECT_EQ(r.state.removed().size(), 2u);
}

TEST(Run, SweepIsolatesEachAlpha) {
  TempDir dir("sweep");
  ExperimentConfig cfg = spat::test::small_experiment(dir.path());
  cfg.model.layers = 3;
  const auto rows = run_sweep(cfg, {0.3, 0.9}, dir.path());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].k, 1u);
  EXPECT_EQ(rows[1].k, 3u);
  EXPECT_EQ(rows[1].removed.size(), 3u);
  EXPECT_GT(rows[0].flops, rows[1].flops);
  EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
  EXPECT_TRUE(fs::exists(dir / "alpha_0.3" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "alpha_0.9" / "metrics.csv"));
  EXPECT_THROW(run_sweep(cfg, {0.3, 1.0}, dir.path()), ConfigError);
}
