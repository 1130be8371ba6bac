#include "spat/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include "spat/errors.hpp"

namespace spat {

using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

void reject_unknown(const json& j, const std::string& path, std::set<std::string> known) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(path + "." + key + ": unknown field");
  }
}

template <typename T>
void read(const json& j, const char* key, const std::string& path, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  const std::string field = path + "." + key;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + ": expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) {
        throw ConfigError(field + ": expected a non-negative integer");
      }
      out = v.get<T>();
    } else {
      out = v.get<T>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

template <typename T>
void read_optional(const json& j, const char* key, const std::string& path,
                   std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T value{};
  read(j, key, path, value);
  out = value;
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

std::string date_to_string(DateColumn d) {
  switch (d) {
    case DateColumn::present: return "present";
    case DateColumn::absent: return "absent";
    default: return "auto";
  }
}

DateColumn parse_date(const std::string& s) {
  if (s == "auto") return DateColumn::automatic;
  if (s == "present") return DateColumn::present;
  if (s == "absent") return DateColumn::absent;
  throw ConfigError("dataset.date_column: expected auto, present or absent, got '" + s + "'");
}

json synthetic_json(const SyntheticSpec& s) {
  return {{"channels", s.channels}, {"length", s.length},         {"periods", s.periods},
          {"noise_std", s.noise_std}, {"trend", s.trend},         {"phase_shift", s.phase_shift},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_from(const json& j, const std::string& path) {
  require_object(j, path);
  reject_unknown(j, path,
                 {"channels", "length", "periods", "noise_std", "trend", "phase_shift", "seed"});
  SyntheticSpec s;
  read(j, "channels", path, s.channels);
  read(j, "length", path, s.length);
  if (j.contains("periods")) {
    const json& p = j.at("periods");
    if (!p.is_array()) throw ConfigError(path + ".periods: expected an array of numbers");
    s.periods.clear();
    for (const auto& v : p) {
      if (!v.is_number()) throw ConfigError(path + ".periods: expected an array of numbers");
      s.periods.push_back(v.get<double>());
    }
  }
  read(j, "noise_std", path, s.noise_std);
  read(j, "trend", path, s.trend);
  read(j, "phase_shift", path, s.phase_shift);
  read(j, "seed", path, s.seed);
  return s;
}

json split_json(const SplitSpec& s) {
  if (s.kind == SplitSpec::Kind::ratios) {
    return {{"kind", "ratios"}, {"train", s.train_ratio}, {"val", s.val_ratio},
            {"test", s.test_ratio}, {"overlap_lookback", s.overlap_lookback}};
  }
  return {{"kind", "counts"}, {"train", s.train_rows}, {"val", s.val_rows},
          {"test", s.test_rows}, {"overlap_lookback", s.overlap_lookback}};
}

SplitSpec split_from(const json& j, const std::string& path) {
  require_object(j, path);
  reject_unknown(j, path, {"kind", "train", "val", "test", "overlap_lookback"});
  SplitSpec s;
  std::string kind = "ratios";
  read(j, "kind", path, kind);
  if (kind == "ratios") {
    s.kind = SplitSpec::Kind::ratios;
    read(j, "train", path, s.train_ratio);
    read(j, "val", path, s.val_ratio);
    read(j, "test", path, s.test_ratio);
  } else if (kind == "counts") {
    s.kind = SplitSpec::Kind::counts;
    read(j, "train", path, s.train_rows);
    read(j, "val", path, s.val_rows);
    read(j, "test", path, s.test_rows);
  } else {
    throw ConfigError(path + ".kind: expected ratios or counts, got '" + kind + "'");
  }
  read(j, "overlap_lookback", path, s.overlap_lookback);
  return s;
}

const std::map<std::string, Preset>& preset_table(const std::string& arch) {
  static const std::map<std::string, Preset> patchtst = {
      {"weather", {1e-4, 128, 256, 3}},  {"traffic", {1e-4, 128, 256, 3}},
      {"electricity", {1e-4, 128, 256, 3}}, {"ili", {2.5e-3, 16, 128, 3}},
      {"etth1", {1e-4, 16, 128, 3}},     {"etth2", {1e-4, 16, 128, 3}},
      {"ettm1", {1e-4, 128, 256, 3}},    {"ettm2", {1e-4, 128, 256, 3}},
  };
  static const std::map<std::string, Preset> itransformer = {
      {"weather", {1e-4, 512, 512, 3}},  {"traffic", {1e-3, 512, 512, 4}},
      {"electricity", {5e-4, 512, 512, 3}}, {"ili", {1e-4, 256, 256, 2}},
      {"etth1", {1e-4, 256, 256, 2}},    {"etth2", {1e-4, 256, 256, 2}},
      {"ettm1", {1e-4, 128, 128, 2}},    {"ettm2", {1e-4, 128, 128, 2}},
  };
  static const std::map<std::string, Preset> none;
  if (arch == "patchtst") return patchtst;
  if (arch == "itransformer") return itransformer;
  return none;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"lookback", c.lookback},
          {"horizon", c.horizon},
          {"channels", c.channels},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"heads", c.heads},
          {"layers", c.layers},
          {"patch_len", c.patch_len},
          {"patch_stride", c.patch_stride},
          {"end_padding", c.end_padding},
          {"dropout", c.dropout},
          {"activation", to_string(c.activation)},
          {"norm", to_string(c.norm)},
          {"instance_norm", c.instance_norm}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  const std::string path = "model";
  require_object(j, path);
  reject_unknown(j, path,
                 {"mode", "lookback", "horizon", "channels", "d_model", "d_ff", "heads", "layers",
                  "patch_len", "patch_stride", "end_padding", "dropout", "activation", "norm",
                  "instance_norm"});
  std::string mode = to_string(c.mode);
  std::string act = to_string(c.activation);
  std::string norm = to_string(c.norm);
  read(j, "mode", path, mode);
  read(j, "activation", path, act);
  read(j, "norm", path, norm);
  c.mode = parse_token_mode(mode);
  c.activation = parse_activation(act);
  c.norm = parse_norm_placement(norm);
  read(j, "lookback", path, c.lookback);
  read(j, "horizon", path, c.horizon);
  read(j, "channels", path, c.channels);
  read(j, "d_model", path, c.d_model);
  read(j, "d_ff", path, c.d_ff);
  read(j, "heads", path, c.heads);
  read(j, "layers", path, c.layers);
  read(j, "patch_len", path, c.patch_len);
  read(j, "patch_stride", path, c.patch_stride);
  read(j, "end_padding", path, c.end_padding);
  read(j, "dropout", path, c.dropout);
  read(j, "instance_norm", path, c.instance_norm);
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  window().validate();
  if (dataset.path.empty() && !dataset.synthetic) {
    throw ConfigError("dataset: either dataset.path or dataset.synthetic is required");
  }
  if (!(optim.lr >= 0.0)) throw ConfigError("optim.lr must be >= 0");
  if (optim.finetune_lr && !(*optim.finetune_lr >= 0.0)) {
    throw ConfigError("optim.finetune_lr must be >= 0");
  }
  if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
  }
  if (!(pruning.alpha > 0.0 && pruning.alpha < 1.0)) {
    throw ConfigError("pruning.alpha must lie in (0, 1)");
  }
  if (run_dir.empty()) throw ConfigError("run_dir must not be empty");
}

json to_json(const ExperimentConfig& c) {
  json dataset = {{"name", c.dataset.name},
                  {"path", c.dataset.path},
                  {"date_column", date_to_string(c.dataset.date)},
                  {"split", split_json(c.dataset.split)}};
  dataset["synthetic"] = c.dataset.synthetic ? synthetic_json(*c.dataset.synthetic) : json(nullptr);
  json model = to_json(c.model);
  model.erase("lookback");
  model.erase("horizon");
  return {{"dataset", dataset},
          {"window", {{"lookback", c.model.lookback},
                      {"horizon", c.model.horizon},
                      {"stride", c.stride}}},
          {"model", model},
          {"optim", {{"lr", c.optim.lr},
                     {"finetune_lr", optional_json(c.optim.finetune_lr)},
                     {"epochs", c.optim.epochs},
                     {"finetune_epochs", optional_json(c.optim.finetune_epochs)},
                     {"patience", c.optim.patience},
                     {"batch_size", c.optim.batch_size},
                     {"beta1", c.optim.beta1},
                     {"beta2", c.optim.beta2},
                     {"eps", c.optim.eps}}},
          {"pruning", {{"alpha", c.pruning.alpha},
                       {"score_batches", c.pruning.score_batches},
                       {"iterative", c.pruning.iterative}}},
          {"seed", c.seed},
          {"run_dir", c.run_dir},
          {"record_wall_time", c.record_wall_time}};
}

ExperimentConfig experiment_from_json(const json& j) {
  require_object(j, "config");
  reject_unknown(j, "config",
                 {"dataset", "window", "model", "optim", "pruning", "seed", "run_dir",
                  "record_wall_time", "preset"});
  ExperimentConfig c;
  if (j.contains("preset")) {
    const json& p = j.at("preset");
    require_object(p, "config.preset");
    reject_unknown(p, "config.preset", {"architecture", "dataset"});
    std::string arch, data;
    read(p, "architecture", "config.preset", arch);
    read(p, "dataset", "config.preset", data);
    apply_preset(c, arch, data);
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    require_object(d, "dataset");
    reject_unknown(d, "dataset", {"name", "path", "date_column", "split", "synthetic"});
    read(d, "name", "dataset", c.dataset.name);
    read(d, "path", "dataset", c.dataset.path);
    std::string date = date_to_string(c.dataset.date);
    read(d, "date_column", "dataset", date);
    c.dataset.date = parse_date(date);
    if (d.contains("split")) c.dataset.split = split_from(d.at("split"), "dataset.split");
    if (d.contains("synthetic") && !d.at("synthetic").is_null()) {
      c.dataset.synthetic = synthetic_from(d.at("synthetic"), "dataset.synthetic");
    }
  }
  if (j.contains("window")) {
    const json& w = j.at("window");
    require_object(w, "window");
    reject_unknown(w, "window", {"lookback", "horizon", "stride"});
    read(w, "lookback", "window", c.model.lookback);
    read(w, "horizon", "window", c.model.horizon);
    read(w, "stride", "window", c.stride);
  }
  if (j.contains("model")) {
    json m = j.at("model");
    require_object(m, "model");
    if (m.contains("lookback") || m.contains("horizon")) {
      throw ConfigError("model.lookback/horizon: set these under window");
    }
    c.model = model_config_from_json(m, c.model);
  }
  if (j.contains("optim")) {
    const json& o = j.at("optim");
    const std::string path = "optim";
    require_object(o, path);
    reject_unknown(o, path,
                   {"lr", "finetune_lr", "epochs", "finetune_epochs", "patience", "batch_size",
                    "beta1", "beta2", "eps"});
    read(o, "lr", path, c.optim.lr);
    read_optional(o, "finetune_lr", path, c.optim.finetune_lr);
    read(o, "epochs", path, c.optim.epochs);
    read_optional(o, "finetune_epochs", path, c.optim.finetune_epochs);
    read(o, "patience", path, c.optim.patience);
    read(o, "batch_size", path, c.optim.batch_size);
    read(o, "beta1", path, c.optim.beta1);
    read(o, "beta2", path, c.optim.beta2);
    read(o, "eps", path, c.optim.eps);
  }
  if (j.contains("pruning")) {
    const json& p = j.at("pruning");
    require_object(p, "pruning");
    reject_unknown(p, "pruning", {"alpha", "score_batches", "iterative"});
    read(p, "alpha", "pruning", c.pruning.alpha);
    read(p, "score_batches", "pruning", c.pruning.score_batches);
    read(p, "iterative", "pruning", c.pruning.iterative);
  }
  read(j, "seed", "config", c.seed);
  read(j, "run_dir", "config", c.run_dir);
  read(j, "record_wall_time", "config", c.record_wall_time);
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

void save_experiment(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << to_json(cfg).dump(2) << '\n';
}

std::string canonical_json(const ExperimentConfig& cfg) { return to_json(cfg).dump(); }

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : canonical_json(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::optional<Preset> find_preset(const std::string& architecture, const std::string& dataset) {
  const auto& table = preset_table(lower(architecture));
  const auto it = table.find(lower(dataset));
  if (it == table.end()) return std::nullopt;
  return it->second;
}

void apply_preset(ExperimentConfig& cfg, const std::string& architecture,
                  const std::string& dataset) {
  const auto p = find_preset(architecture, dataset);
  if (!p) {
    throw ConfigError("preset: no published settings for architecture '" + architecture +
                      "' on dataset '" + dataset + "'");
  }
  cfg.optim.lr = p->lr;
  cfg.model.d_model = p->d_model;
  cfg.model.d_ff = p->d_ff;
  cfg.model.layers = p->layers;
  cfg.model.mode = lower(architecture) == "patchtst" ? TokenMode::temporal : TokenMode::variate;
}

}  // namespace spat
