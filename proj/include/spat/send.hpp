#pragma once

// Sensitivity Enhanced Normalized Dispersion (SEND) scoring of attention
// layers and the bottom-K pruning plan derived from it.
//
// For layer n with connection mask M (all ones) and attention scores A, the
// raw sensitivity is the mask gradient of the batch-averaged loss,
//   Sen = dL/dM = dL/dA' (.) A,      A' = A (.) M,
// which is then normalized row-wise with softmax(|Sen|) over the key axis,
// averaged across heads, and reduced to the mean per-row population standard
// deviation. Larger SEND means a more dispersed, more useful attention layer.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "spat/model.hpp"

namespace spat {

struct SensitivityRecord {
  std::size_t layer = 0;
  Tensor raw;         // [H, S, S]
  Tensor normalized;  // [H, S, S], rows are distributions
  Tensor head_mean;   // [S, S]
  Tensor attention;   // [H, S, S], scores averaged over batches and folded instances
  double send = 0.0;
  std::size_t batches = 0;
};

enum class SensitivityRoute {
  chain_rule,     // upstream gradient of A' times A
  mask_gradient,  // gradient accumulated directly on the mask tensor
};

// Raw per-layer sensitivities, averaged over batches. Entry n is undefined for
// pruned layers. Requires every live mask to be all ones; throws
// ContractError on an empty batch list.
std::vector<Tensor> raw_sensitivity(ForecasterModel& model, std::span<const ForecastBatch> batches,
                                    SensitivityRoute route = SensitivityRoute::chain_rule,
                                    std::vector<Tensor>* mean_attention = nullptr);

// One record per unpruned layer, in layer order.
std::vector<SensitivityRecord> compute_sensitivity(
    ForecasterModel& model, std::span<const ForecastBatch> batches,
    SensitivityRoute route = SensitivityRoute::chain_rule);

// softmax(|Sen|) along the last axis.
Tensor normalize_sensitivity(const Tensor& sen);
// Mean over the leading head axis: [H, S, S] -> [S, S].
Tensor aggregate_heads(const Tensor& sen_norm);
// Mean over rows of the per-row population standard deviation.
double send_score(const Tensor& sen_bar);

SensitivityRecord make_record(std::size_t layer, Tensor raw, std::size_t batches);

struct LayerScore {
  std::size_t layer = 0;
  double send = 0.0;

  bool operator==(const LayerScore&) const = default;
};

struct PruningPlan {
  std::vector<LayerScore> scores;
  std::vector<std::size_t> ranked;  // layer indices, SEND descending
  double alpha = 0.0;
  std::size_t k = 0;
  std::vector<std::size_t> pruned;  // last k entries of `ranked`
};

std::vector<LayerScore> scores_of(std::span<const SensitivityRecord> records);

// K = ceil(alpha * layers). Throws ConfigError unless 0 < alpha < 1.
std::size_t prune_count(double alpha, std::size_t layers);

// Ranks by SEND descending (ties: lower layer index first), K = ceil(alpha*N).
// Throws ConfigError unless 0 < alpha < 1.
PruningPlan build_plan(std::span<const LayerScore> scores, double alpha);

// Structured text report: a version line, then one CSV record per (plan, layer).
void write_send_report(std::ostream& out, std::span<const PruningPlan> plans);

struct SendReportRow {
  double alpha = 0.0;
  std::size_t k = 0;
  std::size_t layer = 0;
  double send = 0.0;
  std::size_t rank = 0;
  bool pruned = false;
};

std::vector<SendReportRow> read_send_report(std::istream& in);

}  // namespace spat
