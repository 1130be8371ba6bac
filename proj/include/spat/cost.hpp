#pragma once

// Accuracy metrics and analytic cost accounting.
//
// FLOPs convention (auditable, batch size 1):
//   matmul [m,k] x [k,n]   2*m*k*n
//   bias add, residual add, scaling, elementwise mul   1 per element
//   softmax                5 per element
//   layer norm             5 per element
//   gelu                   8 per element, relu 1 per element
//   instance norm          4 per input element, de-normalization 2 per output element
// The connection mask is an analysis device and is not part of inference cost.
// Absolute totals depend on this convention; reduction percentages between an
// original and a pruned model are what is meant to be compared.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spat/model.hpp"

namespace spat {

struct CostEntry {
  std::string part;  // "embedding", "block<n>.attention", "block<n>.ffn", "head"
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  static constexpr int kSchemaVersion = 1;

  std::vector<CostEntry> entries;
  std::uint64_t flops_total = 0;
  std::uint64_t params_total = 0;

  std::uint64_t attention_flops() const;
  std::uint64_t attention_params() const;
};

// Analytic report for a configuration with the given layers pruned, for one
// input sample with `input_channels` channels.
CostReport analytic_cost(const ModelConfig& config, std::span<const std::size_t> pruned_layers,
                         std::size_t input_channels);

// Parameter breakdown counted from the tensors the model actually stores.
CostReport count_params(const ForecasterModel& model);

// input_shape = {1, L, C}; the batch dimension is ignored (reported at batch 1).
CostReport count_flops(const ForecasterModel& model, const Shape& input_shape);

// Combined flops (analytic) and params (stored) for a batch-1 input.
CostReport cost_report(const ForecasterModel& model, std::size_t input_channels);

// (reference - current) / reference * 100
double reduction_percent(double reference, double current);

void write_cost_report(std::ostream& out, const CostReport& report,
                       const CostReport* reference = nullptr);

double mse(std::span<const double> prediction, std::span<const double> target);
double mae(std::span<const double> prediction, std::span<const double> target);
double mse(const Tensor& prediction, const Tensor& target);
double mae(const Tensor& prediction, const Tensor& target);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;

  bool operator==(const Metrics&) const = default;
};

// Forecasts every batch and averages per-batch MSE/MAE. Leaves the model in
// evaluation mode on return and never touches weights.
Metrics evaluate(ForecasterModel& model, std::span<const ForecastBatch> batches);

struct HorizonRow {
  std::size_t horizon = 0;
  std::optional<Metrics> metrics;  // absent: no checkpoint for this horizon
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct HorizonReport {
  std::vector<HorizonRow> rows;
  std::optional<Metrics> average;  // over present rows
  double average_flops = 0.0;
  double average_params = 0.0;
};

HorizonReport horizon_report(std::vector<HorizonRow> rows);
void write_horizon_csv(std::ostream& out, const HorizonReport& report);
void write_horizon_text(std::ostream& out, const HorizonReport& report);

}  // namespace spat
