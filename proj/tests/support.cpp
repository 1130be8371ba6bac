#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace spat::test {

namespace fs = std::filesystem;

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(shape, std::move(v));
}

TempDir::TempDir(const std::string& tag) {
  static std::uint64_t counter = 0;
  std::random_device rd;
  for (;;) {
    path_ = fs::temp_directory_path() /
            ("spat_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    if (fs::create_directories(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

GradCheck check_gradient(const std::function<Tensor()>& loss_fn, Tensor input, double h,
                         double abs_floor) {
  input.set_requires_grad(true);
  input.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_fn();
    tape.backward(loss);
  }
  // No gradient recorded means the loss does not depend on `input` through the tape.
  std::vector<double> analytic(input.numel(), 0.0);
  if (input.has_grad()) analytic.assign(input.grad().begin(), input.grad().end());
  input.zero_grad();

  GradCheck out;
  auto data = input.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = loss_fn().item();
    data[i] = saved - h;
    const double down = loss_fn().item();
    data[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
    const double err = std::abs(analytic[i] - numeric) / scale;
    if (err > out.max_rel_error) {
      out.max_rel_error = err;
      out.worst_analytic = analytic[i];
      out.worst_numeric = numeric;
    }
    ++out.checked;
  }
  return out;
}

ModelConfig tiny_temporal(std::size_t layers) {
  ModelConfig c;
  c.mode = TokenMode::temporal;
  c.lookback = 16;
  c.horizon = 4;
  c.channels = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.heads = 2;
  c.layers = layers;
  c.patch_len = 4;
  c.patch_stride = 2;
  c.end_padding = true;
  c.dropout = 0.0;
  return c;
}

ModelConfig tiny_variate(std::size_t channels, std::size_t layers) {
  ModelConfig c;
  c.mode = TokenMode::variate;
  c.lookback = 12;
  c.horizon = 4;
  c.channels = channels;
  c.d_model = 8;
  c.d_ff = 16;
  c.heads = 2;
  c.layers = layers;
  c.dropout = 0.0;
  return c;
}

ForecastBatch random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t channels,
                           std::mt19937_64& rng) {
  return {random_tensor({batch, cfg.lookback, channels}, rng),
          random_tensor({batch, cfg.horizon, channels}, rng)};
}

ExperimentConfig small_experiment(const fs::path& run_dir) {
  ExperimentConfig c;
  SyntheticSpec s;
  s.channels = 2;
  s.length = 400;
  s.periods = {12.0, 40.0};
  s.noise_std = 0.05;
  c.dataset.name = "sine";
  c.dataset.synthetic = s;
  c.model.mode = TokenMode::temporal;
  c.model.lookback = 32;
  c.model.horizon = 8;
  c.model.d_model = 8;
  c.model.d_ff = 16;
  c.model.heads = 2;
  c.model.layers = 2;
  c.model.patch_len = 8;
  c.model.patch_stride = 4;
  c.model.dropout = 0.0;
  c.optim.lr = 3e-3;
  c.optim.epochs = 3;
  c.optim.finetune_epochs = 2;
  c.optim.patience = 3;
  c.optim.batch_size = 32;
  c.pruning.alpha = 0.5;
  c.seed = 11;
  c.run_dir = run_dir.string();
  return c;
}

void write_ett_like_csv(const fs::path& path, std::size_t rows, std::uint64_t seed) {
  std::ofstream out(path);
  out << "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n";
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  char buf[64];
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t day = r / 24;
    std::snprintf(buf, sizeof buf, "2016-%02zu-%02zu %02zu:00:00", 1 + (day / 28) % 12,
                  1 + day % 28, r % 24);
    out << buf;
    for (int c = 0; c < 7; ++c) {
      const double v = 5.0 + c + 2.0 * std::sin(2.0 * 3.141592653589793 * r / 24.0 + c) +
                       noise(rng);
      std::snprintf(buf, sizeof buf, ",%.3f", v);
      out << buf;
    }
    out << '\n';
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace spat::test
