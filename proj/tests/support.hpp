#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spat/config.hpp"
#include "spat/data.hpp"
#include "spat/model.hpp"
#include "spat/tensor.hpp"

namespace spat::test {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct GradCheck {
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Compares the tape gradient of `loss_fn()` with respect to `input` against
// central differences of step `h`. The relative error divides by
// max(|analytic|, |numeric|, abs_floor); at h = 1e-5 the difference quotient
// carries round-off near 1e-11, so exactly-zero gradients need a floor.
GradCheck check_gradient(const std::function<Tensor()>& loss_fn, Tensor input, double h = 1e-5,
                         double abs_floor = 1e-6);

// Small temporal / variate configurations used across suites.
ModelConfig tiny_temporal(std::size_t layers = 2);
ModelConfig tiny_variate(std::size_t channels = 3, std::size_t layers = 2);

// Random batch matching a model configuration.
ForecastBatch random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t channels,
                           std::mt19937_64& rng);

// Small end-to-end experiment on synthetic data, fast enough for unit tests.
ExperimentConfig small_experiment(const std::filesystem::path& run_dir);

// ETT-hour-shaped CSV: date column plus 7 channels, `rows` rows.
void write_ett_like_csv(const std::filesystem::path& path, std::size_t rows, std::uint64_t seed);

std::string read_file(const std::filesystem::path& path);

}  // namespace spat::test
