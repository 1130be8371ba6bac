#include "spat/send.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "spat/errors.hpp"

namespace spat {

namespace {

// Sums a [B', H, S, S] tensor over its leading axis into `acc` ([H, S, S]).
void accumulate_over_batch(std::span<const double> values, std::vector<double>& acc) {
  const std::size_t block = acc.size();
  for (std::size_t i = 0; i < values.size(); ++i) acc[i % block] += values[i];
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<Tensor> raw_sensitivity(ForecasterModel& model, std::span<const ForecastBatch> batches,
                                    SensitivityRoute route, std::vector<Tensor>* mean_attention) {
  if (batches.empty()) throw ContractError("compute_sensitivity: no batches");
  auto& blocks = model.blocks();
  const std::size_t layers = blocks.size();
  for (std::size_t n = 0; n < layers; ++n) {
    if (blocks[n].pruned()) continue;
    for (double m : blocks[n].mask.data()) {
      if (m != 1.0) {
        throw ContractError("compute_sensitivity: mask of layer " + std::to_string(n) +
                            " is not all ones");
      }
    }
  }

  // Only the masks need gradients: every op downstream of A' is recorded,
  // which is exactly the path dL/dA' flows along.
  struct Restore {
    ForecasterModel& model;
    std::vector<NamedTensor> params = model.parameters();
    std::vector<bool> flags;
    bool training = model.training();

    explicit Restore(ForecasterModel& m) : model(m) {
      for (auto& [name, t] : params) {
        flags.push_back(t.requires_grad());
        t.set_requires_grad(false);
      }
      model.set_training(false);
    }
    ~Restore() {
      for (auto& b : model.blocks()) {
        b.mask.set_requires_grad(false);
        b.mask.zero_grad();
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].second.set_requires_grad(flags[i]);
        params[i].second.zero_grad();
      }
      model.set_training(training);
    }
  } restore(model);

  std::vector<std::vector<double>> acc(layers);
  std::vector<std::vector<double>> attn(layers);
  std::vector<double> folded(layers, 0.0);
  for (std::size_t n = 0; n < layers; ++n) {
    if (blocks[n].pruned()) continue;
    acc[n].assign(blocks[n].mask.numel(), 0.0);
    attn[n].assign(blocks[n].mask.numel(), 0.0);
    blocks[n].mask.zero_grad();
    blocks[n].mask.set_requires_grad(true);
  }

  for (const auto& batch : batches) {
    Tape tape;
    TapeScope scope(tape);
    AttentionTrace trace;
    const Tensor loss = mse_loss(model.forecast(batch.inputs, &trace), batch.targets);
    tape.backward(loss);
    for (std::size_t n = 0; n < layers; ++n) {
      if (blocks[n].pruned()) continue;
      const Tensor& scores = trace.scores[n];
      if (route == SensitivityRoute::chain_rule) {
        const Tensor& masked = trace.masked[n];
        std::vector<double> sen(scores.numel(), 0.0);
        if (masked.has_grad()) {
          auto g = masked.grad();
          auto a = scores.data();
          for (std::size_t i = 0; i < sen.size(); ++i) sen[i] = g[i] * a[i];
        }
        accumulate_over_batch(sen, acc[n]);
      } else {
        Tensor& mask = blocks[n].mask;
        if (mask.has_grad()) {
          auto g = mask.grad();
          for (std::size_t i = 0; i < acc[n].size(); ++i) acc[n][i] += g[i];
        }
        mask.zero_grad();
      }
      accumulate_over_batch(scores.data(), attn[n]);
      folded[n] += static_cast<double>(scores.size(0));
    }
  }

  // Average over the B batches of the averaged loss.
  const double inv_b = 1.0 / static_cast<double>(batches.size());
  std::vector<Tensor> out(layers);
  if (mean_attention) mean_attention->assign(layers, Tensor());
  for (std::size_t n = 0; n < layers; ++n) {
    if (blocks[n].pruned()) continue;
    for (double& v : acc[n]) v *= inv_b;
    out[n] = Tensor::from(blocks[n].mask.shape(), std::move(acc[n]));
    if (mean_attention) {
      for (double& v : attn[n]) v /= folded[n];
      (*mean_attention)[n] = Tensor::from(blocks[n].mask.shape(), std::move(attn[n]));
    }
  }
  return out;
}

Tensor normalize_sensitivity(const Tensor& sen) {
  if (sen.dim() < 1) throw ShapeError("normalize_sensitivity: scalar input");
  for (double v : sen.data()) {
    if (std::isnan(v)) throw NumericError("normalize_sensitivity: NaN sensitivity");
  }
  return row_softmax(abs(sen.detach()));
}

Tensor aggregate_heads(const Tensor& sen_norm) {
  if (sen_norm.dim() != 3) {
    throw ShapeError("aggregate_heads: expected [H, S, S], got " + shape_str(sen_norm.shape()));
  }
  if (sen_norm.size(0) == 0) throw ContractError("aggregate_heads: no heads");
  return mean_along_axis(sen_norm.detach(), 0);
}

double send_score(const Tensor& sen_bar) {
  if (sen_bar.dim() != 2) {
    throw ShapeError("send_score: expected [S, S], got " + shape_str(sen_bar.shape()));
  }
  if (sen_bar.size(0) == 0 || sen_bar.size(1) == 0) throw ContractError("send_score: S = 0");
  return mean(std_along_axis(sen_bar.detach(), 1)).item();
}

SensitivityRecord make_record(std::size_t layer, Tensor raw, std::size_t batches) {
  SensitivityRecord r;
  r.layer = layer;
  r.raw = std::move(raw);
  r.normalized = normalize_sensitivity(r.raw);
  r.head_mean = aggregate_heads(r.normalized);
  r.send = send_score(r.head_mean);
  r.batches = batches;
  return r;
}

std::vector<SensitivityRecord> compute_sensitivity(ForecasterModel& model,
                                                   std::span<const ForecastBatch> batches,
                                                   SensitivityRoute route) {
  std::vector<Tensor> attention;
  auto raw = raw_sensitivity(model, batches, route, &attention);
  std::vector<SensitivityRecord> records;
  for (std::size_t n = 0; n < raw.size(); ++n) {
    if (!raw[n].defined()) continue;
    auto rec = make_record(n, raw[n], batches.size());
    rec.attention = attention[n];
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<LayerScore> scores_of(std::span<const SensitivityRecord> records) {
  std::vector<LayerScore> out;
  for (const auto& r : records) out.push_back({r.layer, r.send});
  return out;
}

std::size_t prune_count(double alpha, std::size_t layers) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("pruning ratio alpha must lie in (0, 1), got " + format_double(alpha));
  }
  // The epsilon absorbs representation error, e.g. 0.7 * 10 = 7.000000000000001.
  const auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(layers) - 1e-9));
  return std::min(k, layers);
}

PruningPlan build_plan(std::span<const LayerScore> scores, double alpha) {
  const std::size_t k = prune_count(alpha, scores.size());
  if (scores.empty()) throw ContractError("build_plan: no layer scores");
  PruningPlan plan;
  plan.scores.assign(scores.begin(), scores.end());
  plan.alpha = alpha;
  std::vector<LayerScore> sorted = plan.scores;
  std::stable_sort(sorted.begin(), sorted.end(), [](const LayerScore& a, const LayerScore& b) {
    if (a.send != b.send) return a.send > b.send;
    return a.layer < b.layer;
  });
  for (const auto& s : sorted) plan.ranked.push_back(s.layer);
  plan.k = k;
  plan.pruned.assign(plan.ranked.end() - static_cast<std::ptrdiff_t>(plan.k), plan.ranked.end());
  return plan;
}

void write_send_report(std::ostream& out, std::span<const PruningPlan> plans) {
  out << "# spat send report v1\n";
  out << "alpha,k,layer,send,rank,pruned\n";
  for (const auto& plan : plans) {
    for (const auto& s : plan.scores) {
      const auto it = std::find(plan.ranked.begin(), plan.ranked.end(), s.layer);
      const std::size_t rank = static_cast<std::size_t>(it - plan.ranked.begin()) + 1;
      const bool pruned =
          std::find(plan.pruned.begin(), plan.pruned.end(), s.layer) != plan.pruned.end();
      out << format_double(plan.alpha) << ',' << plan.k << ',' << s.layer << ','
          << format_double(s.send) << ',' << rank << ',' << (pruned ? "true" : "false") << '\n';
    }
  }
}

std::vector<SendReportRow> read_send_report(std::istream& in) {
  std::vector<SendReportRow> rows;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "alpha,k,layer,send,rank,pruned") {
        throw ParseError("send report: unexpected header", lineno, 0);
      }
      header_seen = true;
      continue;
    }
    std::istringstream is(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw ParseError("send report: expected 6 fields", lineno, 0);
    try {
      SendReportRow r;
      r.alpha = std::stod(cells[0]);
      r.k = std::stoul(cells[1]);
      r.layer = std::stoul(cells[2]);
      r.send = std::stod(cells[3]);
      r.rank = std::stoul(cells[4]);
      r.pruned = cells[5] == "true";
      rows.push_back(r);
    } catch (const std::exception&) {
      throw ParseError("send report: malformed record", lineno, 0);
    }
  }
  return rows;
}

}  // namespace spat
