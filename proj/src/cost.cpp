#include "spat/cost.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "spat/errors.hpp"

namespace spat {

namespace {

constexpr std::uint64_t kSoftmaxPerElement = 5;
constexpr std::uint64_t kLayerNormPerElement = 5;
constexpr std::uint64_t kGeluPerElement = 8;
constexpr std::uint64_t kReluPerElement = 1;
constexpr std::uint64_t kInstanceNormPerElement = 4;
constexpr std::uint64_t kDenormPerElement = 2;

std::uint64_t matmul_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  return 2 * m * k * n;
}

// Linear layer on `rows` inputs: product plus bias.
std::uint64_t linear_flops(std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
  return matmul_flops(rows, in, out) + rows * out;
}

std::uint64_t linear_params(std::uint64_t in, std::uint64_t out) { return in * out + out; }

bool is_attention(const std::string& part) {
  return part.size() > 10 && part.compare(part.size() - 10, 10, ".attention") == 0;
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void check_same(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError(std::string(op) + ": size mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
}

void finalize(CostReport& r) {
  r.flops_total = 0;
  r.params_total = 0;
  for (const auto& e : r.entries) {
    r.flops_total += e.flops;
    r.params_total += e.params;
  }
}

}  // namespace

std::uint64_t CostReport::attention_flops() const {
  std::uint64_t total = 0;
  for (const auto& e : entries)
    if (is_attention(e.part)) total += e.flops;
  return total;
}

std::uint64_t CostReport::attention_params() const {
  std::uint64_t total = 0;
  for (const auto& e : entries)
    if (is_attention(e.part)) total += e.params;
  return total;
}

CostReport analytic_cost(const ModelConfig& cfg, std::span<const std::size_t> pruned_layers,
                         std::size_t input_channels) {
  cfg.validate();
  const std::uint64_t c = input_channels;
  const std::uint64_t l = cfg.lookback;
  const std::uint64_t t = cfg.horizon;
  const std::uint64_t d = cfg.d_model;
  const std::uint64_t ff = cfg.d_ff;
  const std::uint64_t h = cfg.heads;
  const std::uint64_t dh = d / h;
  const bool temporal = cfg.mode == TokenMode::temporal;
  const std::uint64_t s = cfg.token_count(input_channels);
  const std::uint64_t seqs = temporal ? c : 1;  // folded batch at batch size 1
  const std::uint64_t tokens = seqs * s;

  CostReport r;
  CostEntry embed{"embedding", kInstanceNormPerElement * l * c, 0};
  if (temporal) {
    embed.flops += linear_flops(tokens, cfg.patch_len, d) + tokens * d;  // + positions
    embed.params = linear_params(cfg.patch_len, d) + s * d;
  } else {
    embed.flops += linear_flops(c, l, d);
    embed.params = linear_params(l, d);
  }
  r.entries.push_back(embed);

  const std::uint64_t act = cfg.activation == Activation::gelu ? kGeluPerElement : kReluPerElement;
  for (std::size_t n = 0; n < cfg.layers; ++n) {
    const bool pruned =
        std::find(pruned_layers.begin(), pruned_layers.end(), n) != pruned_layers.end();
    CostEntry attn{"block" + std::to_string(n) + ".attention", 0, 0};
    if (!pruned) {
      attn.flops = kLayerNormPerElement * tokens * d           // sublayer norm
                   + 3 * linear_flops(tokens, d, d)            // Q, K, V
                   + seqs * h * matmul_flops(s, dh, s)         // Q K^T
                   + seqs * h * s * s                          // 1/sqrt(d_head)
                   + kSoftmaxPerElement * seqs * h * s * s     // softmax
                   + seqs * h * matmul_flops(s, s, dh)         // A V
                   + linear_flops(tokens, d, d)                // output projection
                   + tokens * d;                               // residual
      attn.params = 4 * linear_params(d, d);
    }
    r.entries.push_back(attn);
    CostEntry ffn{"block" + std::to_string(n) + ".ffn", 0, 0};
    ffn.flops = kLayerNormPerElement * tokens * d + linear_flops(tokens, d, ff) +
                act * tokens * ff + linear_flops(tokens, ff, d) + tokens * d;
    ffn.params = 2 * 2 * d  // both sublayer norms
                 + linear_params(d, ff) + linear_params(ff, d);
    r.entries.push_back(ffn);
  }

  CostEntry head{"head", kDenormPerElement * t * c, 0};
  if (cfg.norm == NormPlacement::pre) {
    head.flops += kLayerNormPerElement * tokens * d;
    head.params += 2 * d;
  }
  if (temporal) {
    head.flops += linear_flops(seqs, s * d, t);
    head.params += linear_params(s * d, t);
  } else {
    head.flops += linear_flops(c, d, t);
    head.params += linear_params(d, t);
  }
  r.entries.push_back(head);
  finalize(r);
  return r;
}

CostReport count_params(const ForecasterModel& model) {
  const ModelConfig& cfg = model.config();
  CostReport r;
  r.entries.push_back({"embedding", 0, 0});
  for (std::size_t n = 0; n < cfg.layers; ++n) {
    r.entries.push_back({"block" + std::to_string(n) + ".attention", 0, 0});
    r.entries.push_back({"block" + std::to_string(n) + ".ffn", 0, 0});
  }
  r.entries.push_back({"head", 0, 0});
  for (const auto& [name, tensor] : model.parameters()) {
    std::size_t slot = 0;
    if (name.rfind("blocks.", 0) == 0) {
      const std::size_t layer = std::stoul(name.substr(7));
      const bool attn = name.find(".attn.") != std::string::npos;
      slot = 1 + 2 * layer + (attn ? 0 : 1);
    } else if (name.rfind("embed", 0) == 0) {
      slot = 0;
    } else {
      slot = r.entries.size() - 1;
    }
    r.entries[slot].params += tensor.numel();
  }
  finalize(r);
  return r;
}

CostReport count_flops(const ForecasterModel& model, const Shape& input_shape) {
  if (input_shape.size() != 3 || input_shape[1] != model.config().lookback) {
    throw ShapeError("count_flops: expected input shape [1, L, C], got " +
                     shape_str(input_shape));
  }
  const auto pruned = model.pruned_layers();
  CostReport r = analytic_cost(model.config(), pruned, input_shape[2]);
  for (auto& e : r.entries) e.params = 0;
  finalize(r);
  return r;
}

CostReport cost_report(const ForecasterModel& model, std::size_t input_channels) {
  CostReport flops = count_flops(model, {1, model.config().lookback, input_channels});
  const CostReport params = count_params(model);
  for (std::size_t i = 0; i < flops.entries.size(); ++i) {
    flops.entries[i].params = params.entries[i].params;
  }
  finalize(flops);
  return flops;
}

double reduction_percent(double reference, double current) {
  if (reference == 0.0) throw ContractError("reduction_percent: zero reference");
  return (reference - current) / reference * 100.0;
}

void write_cost_report(std::ostream& out, const CostReport& report, const CostReport* reference) {
  out << "# spat cost report\n";
  out << "schema_version," << CostReport::kSchemaVersion << '\n';
  out << "part,flops,params\n";
  for (const auto& e : report.entries) out << e.part << ',' << e.flops << ',' << e.params << '\n';
  out << "total," << report.flops_total << ',' << report.params_total << '\n';
  if (reference) {
    out << "reduction_percent,"
        << fmt(reduction_percent(static_cast<double>(reference->flops_total),
                                 static_cast<double>(report.flops_total)),
               "%.3f")
        << ','
        << fmt(reduction_percent(static_cast<double>(reference->params_total),
                                 static_cast<double>(report.params_total)),
               "%.3f")
        << '\n';
  }
}

double mse(std::span<const double> prediction, std::span<const double> target) {
  check_same(prediction, target, "mse");
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    total += d * d;
  }
  return total / static_cast<double>(prediction.size());
}

double mae(std::span<const double> prediction, std::span<const double> target) {
  check_same(prediction, target, "mae");
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) total += std::fabs(prediction[i] - target[i]);
  return total / static_cast<double>(prediction.size());
}

double mse(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mse: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  return mse(prediction.data(), target.data());
}

double mae(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mae: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  return mae(prediction.data(), target.data());
}

Metrics evaluate(ForecasterModel& model, std::span<const ForecastBatch> batches) {
  if (batches.empty()) throw ContractError("evaluate: no batches");
  model.set_training(false);
  Metrics m;
  for (const auto& b : batches) {
    const Tensor pred = model.forecast(b.inputs);
    m.mse += mse(pred, b.targets);
    m.mae += mae(pred, b.targets);
  }
  m.mse /= static_cast<double>(batches.size());
  m.mae /= static_cast<double>(batches.size());
  return m;
}

HorizonReport horizon_report(std::vector<HorizonRow> rows) {
  HorizonReport r;
  r.rows = std::move(rows);
  std::size_t present = 0;
  Metrics sum;
  double flops = 0.0;
  double params = 0.0;
  for (const auto& row : r.rows) {
    if (!row.metrics) continue;
    ++present;
    sum.mse += row.metrics->mse;
    sum.mae += row.metrics->mae;
    flops += static_cast<double>(row.flops);
    params += static_cast<double>(row.params);
  }
  if (present > 0) {
    const double n = static_cast<double>(present);
    r.average = Metrics{sum.mse / n, sum.mae / n};
    r.average_flops = flops / n;
    r.average_params = params / n;
  }
  return r;
}

void write_horizon_csv(std::ostream& out, const HorizonReport& report) {
  out << "horizon,mse,mae,flops,params\n";
  for (const auto& row : report.rows) {
    out << row.horizon << ',';
    if (row.metrics) {
      out << fmt(row.metrics->mse, "%.10g") << ',' << fmt(row.metrics->mae, "%.10g") << ','
          << row.flops << ',' << row.params << '\n';
    } else {
      out << "absent,absent,absent,absent\n";
    }
  }
  out << "average,";
  if (report.average) {
    out << fmt(report.average->mse, "%.10g") << ',' << fmt(report.average->mae, "%.10g") << ','
        << fmt(report.average_flops, "%.10g") << ',' << fmt(report.average_params, "%.10g")
        << '\n';
  } else {
    out << "absent,absent,absent,absent\n";
  }
}

void write_horizon_text(std::ostream& out, const HorizonReport& report) {
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %10s %10s %14s %12s\n", "horizon", "MSE", "MAE",
                "FLOPs", "Params");
  out << line;
  for (const auto& row : report.rows) {
    if (row.metrics) {
      std::snprintf(line, sizeof line, "%-10zu %10.4f %10.4f %14llu %12llu\n", row.horizon,
                    row.metrics->mse, row.metrics->mae,
                    static_cast<unsigned long long>(row.flops),
                    static_cast<unsigned long long>(row.params));
    } else {
      std::snprintf(line, sizeof line, "%-10zu %10s %10s %14s %12s\n", row.horizon, "absent",
                    "absent", "-", "-");
    }
    out << line;
  }
  if (report.average) {
    std::snprintf(line, sizeof line, "%-10s %10.4f %10.4f %14.0f %12.0f\n", "average",
                  report.average->mse, report.average->mae, report.average_flops,
                  report.average_params);
  } else {
    std::snprintf(line, sizeof line, "%-10s %10s %10s %14s %12s\n", "average", "absent", "absent",
                  "-", "-");
  }
  out << line;
}

}  // namespace spat
