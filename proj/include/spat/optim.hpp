#pragma once

// Adam with a per-step cosine learning-rate schedule.

#include <cstddef>
#include <vector>

#include "spat/model.hpp"

namespace spat {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 1;  // cosine decays from lr to 0 over this many steps
};

// lr_t = lr * 0.5 * (1 + cos(pi * t / total)), clamped at t = total.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

class Adam {
 public:
  // Moments are allocated to match `params`. The handles alias model storage.
  Adam(std::vector<NamedTensor> params, AdamConfig config);

  // Applies one update from the gradients currently stored on the parameters.
  // Parameters without a gradient are skipped (moments untouched).
  void step();
  void zero_grad();

  std::size_t steps() const { return step_; }
  double current_lr() const;
  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

}  // namespace spat
