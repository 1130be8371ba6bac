#include "spat/model.hpp"

#include <algorithm>
#include <cmath>

#include "spat/errors.hpp"

namespace spat {

std::string to_string(TokenMode mode) {
  return mode == TokenMode::temporal ? "temporal_tokens" : "variate_tokens";
}

std::string to_string(Activation act) { return act == Activation::gelu ? "gelu" : "relu"; }

std::string to_string(NormPlacement norm) { return norm == NormPlacement::pre ? "pre" : "post"; }

TokenMode parse_token_mode(const std::string& s) {
  if (s == "temporal_tokens" || s == "temporal") return TokenMode::temporal;
  if (s == "variate_tokens" || s == "variate") return TokenMode::variate;
  throw ConfigError("model.mode: expected temporal_tokens or variate_tokens, got '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("model.activation: expected gelu or relu, got '" + s + "'");
}

NormPlacement parse_norm_placement(const std::string& s) {
  if (s == "pre") return NormPlacement::pre;
  if (s == "post") return NormPlacement::post;
  throw ConfigError("model.norm: expected pre or post, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field + " must be >= 1");
  };
  positive(lookback, "lookback");
  positive(horizon, "horizon");
  positive(channels, "channels");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(heads, "heads");
  positive(layers, "layers");
  if (d_model % heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) +
                      ") must be divisible by model.heads (" + std::to_string(heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (mode == TokenMode::temporal) {
    positive(patch_len, "patch_len");
    positive(patch_stride, "patch_stride");
    if (lookback < patch_len) {
      throw ConfigError("model.patch_len (" + std::to_string(patch_len) +
                        ") exceeds lookback (" + std::to_string(lookback) + ")");
    }
  }
}

std::size_t ModelConfig::token_count() const { return token_count(channels); }

std::size_t ModelConfig::token_count(std::size_t input_channels) const {
  if (mode == TokenMode::variate) return input_channels;
  if (lookback < patch_len) {
    throw ConfigError("model.patch_len (" + std::to_string(patch_len) + ") exceeds lookback (" +
                      std::to_string(lookback) + ")");
  }
  return (lookback - patch_len) / patch_stride + 1 + (end_padding ? 1 : 0);
}

namespace {

constexpr double kInstanceNormEps = 1e-5;

double canonical(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = (2.0 * canonical(rng) - 1.0) * bound;
  t.set_requires_grad(true);
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = uniform({in, out}, bound, rng);
  l.bias = uniform({out}, bound, rng);
  return l;
}

LayerNormParams make_norm(std::size_t d) {
  LayerNormParams n{Tensor::ones({d}), Tensor::zeros({d})};
  n.gamma.set_requires_grad(true);
  n.beta.set_requires_grad(true);
  return n;
}

Tensor apply(const Linear& l, const Tensor& x) { return add(matmul(x, l.weight), l.bias); }

Tensor apply(const LayerNormParams& n, const Tensor& x) { return layer_norm(x, n.gamma, n.beta); }

Linear clone(const Linear& l) { return {l.weight.clone(), l.bias.clone()}; }

LayerNormParams clone(const LayerNormParams& n) { return {n.gamma.clone(), n.beta.clone()}; }

Tensor clone_if(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

void push_linear(std::vector<NamedTensor>& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

void push_norm(std::vector<NamedTensor>& out, const std::string& prefix,
               const LayerNormParams& n) {
  out.emplace_back(prefix + ".gamma", n.gamma);
  out.emplace_back(prefix + ".beta", n.beta);
}

struct InstanceStats {
  std::vector<double> mean;  // [batch, C]
  std::vector<double> stdev;
};

// Standardizes each (sample, channel) series over the lookback axis.
std::vector<double> instance_normalize(const Tensor& x, bool enabled, InstanceStats& stats) {
  const std::size_t batch = x.size(0), len = x.size(1), channels = x.size(2);
  auto in = x.data();
  std::vector<double> out(in.begin(), in.end());
  stats.mean.assign(batch * channels, 0.0);
  stats.stdev.assign(batch * channels, 1.0);
  if (!enabled) return out;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double mu = 0.0;
      for (std::size_t t = 0; t < len; ++t) mu += in[(b * len + t) * channels + c];
      mu /= static_cast<double>(len);
      double var = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double d = in[(b * len + t) * channels + c] - mu;
        var += d * d;
      }
      var /= static_cast<double>(len);
      const double sd = std::sqrt(var + kInstanceNormEps);
      stats.mean[b * channels + c] = mu;
      stats.stdev[b * channels + c] = sd;
      for (std::size_t t = 0; t < len; ++t) {
        double& v = out[(b * len + t) * channels + c];
        v = (v - mu) / sd;
      }
    }
  }
  return out;
}

Tensor embed_normalized(ForecasterModel& model, const std::vector<double>& xn, std::size_t batch,
                        std::size_t channels, const DropoutContext& drop) {
  const ModelConfig& cfg = model.config();
  const std::size_t len = cfg.lookback;
  Tensor tokens;
  if (cfg.mode == TokenMode::temporal) {
    const std::size_t s_count = cfg.token_count(channels);
    const std::size_t plen = cfg.patch_len;
    std::vector<double> patches(batch * channels * s_count * plen);
    std::size_t k = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t s = 0; s < s_count; ++s) {
          for (std::size_t p = 0; p < plen; ++p) {
            // End padding repeats the final observation.
            const std::size_t t = std::min(s * cfg.patch_stride + p, len - 1);
            patches[k++] = xn[(b * len + t) * channels + c];
          }
        }
      }
    }
    Tensor patch_tensor = Tensor::from({batch * channels, s_count, plen}, std::move(patches));
    tokens = add(apply(model.embedding(), patch_tensor), model.position());
  } else {
    std::vector<double> series(batch * channels * len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t t = 0; t < len; ++t)
          series[(b * channels + c) * len + t] = xn[(b * len + t) * channels + c];
    tokens = apply(model.embedding(), Tensor::from({batch, channels, len}, std::move(series)));
  }
  return dropout(tokens, drop);
}

void check_input(const ModelConfig& cfg, const Tensor& x) {
  if (x.dim() != 3 || x.size(0) == 0 || x.size(1) != cfg.lookback) {
    throw ShapeError("forecast: expected input [batch, " + std::to_string(cfg.lookback) +
                     ", C], got " + shape_str(x.shape()));
  }
  if (cfg.mode == TokenMode::variate && x.size(2) != cfg.channels) {
    throw ShapeError("forecast: variate-token model expects " + std::to_string(cfg.channels) +
                     " channels, got " + std::to_string(x.size(2)));
  }
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("forecast: non-finite input value");
  }
}

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError("forecast: non-finite activations " + where);
  }
}

}  // namespace

ForecasterModel::ForecasterModel(ModelConfig config, std::uint64_t init_seed)
    : config_(std::move(config)), dropout_rng_(init_seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t d = config_.d_model;
  const std::size_t s_count = config_.token_count();
  if (config_.mode == TokenMode::temporal) {
    embed_ = make_linear(config_.patch_len, d, rng);
    position_ = uniform({s_count, d}, 0.02, rng);
  } else {
    embed_ = make_linear(config_.lookback, d, rng);
  }
  blocks_.resize(config_.layers);
  for (auto& block : blocks_) {
    block.attn_norm = make_norm(d);
    AttentionWeights w;
    w.query = make_linear(d, d, rng);
    w.key = make_linear(d, d, rng);
    w.value = make_linear(d, d, rng);
    w.output = make_linear(d, d, rng);
    block.attention = std::move(w);
    block.mask = Tensor::ones({config_.heads, s_count, s_count});
    block.ffn_norm = make_norm(d);
    block.ffn_in = make_linear(d, config_.d_ff, rng);
    block.ffn_out = make_linear(config_.d_ff, d, rng);
  }
  if (config_.norm == NormPlacement::pre) final_norm_ = make_norm(d);
  const std::size_t head_in = config_.mode == TokenMode::temporal ? s_count * d : d;
  head_ = make_linear(head_in, config_.horizon, rng);
}

std::vector<NamedTensor> ForecasterModel::parameters() const {
  std::vector<NamedTensor> out;
  push_linear(out, "embed", embed_);
  if (position_.defined()) out.emplace_back("embed.position", position_);
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    const auto& b = blocks_[n];
    const std::string p = "blocks." + std::to_string(n);
    push_norm(out, p + ".attn_norm", b.attn_norm);
    if (b.attention) {
      push_linear(out, p + ".attn.query", b.attention->query);
      push_linear(out, p + ".attn.key", b.attention->key);
      push_linear(out, p + ".attn.value", b.attention->value);
      push_linear(out, p + ".attn.output", b.attention->output);
    }
    push_norm(out, p + ".ffn_norm", b.ffn_norm);
    push_linear(out, p + ".ffn.in", b.ffn_in);
    push_linear(out, p + ".ffn.out", b.ffn_out);
  }
  if (final_norm_.gamma.defined()) push_norm(out, "final_norm", final_norm_);
  push_linear(out, "head", head_);
  return out;
}

std::vector<NamedTensor> ForecasterModel::state() const {
  std::vector<NamedTensor> out = parameters();
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    out.emplace_back("blocks." + std::to_string(n) + ".mask", blocks_[n].mask);
  }
  return out;
}

std::size_t ForecasterModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : parameters()) total += t.numel();
  return total;
}

void ForecasterModel::prune_layer(std::size_t layer) {
  if (layer >= blocks_.size()) {
    throw ContractError("prune: layer " + std::to_string(layer) + " out of range (N=" +
                        std::to_string(blocks_.size()) + ")");
  }
  if (blocks_[layer].pruned()) {
    throw ContractError("prune: layer " + std::to_string(layer) + " is already pruned");
  }
  blocks_[layer].attention.reset();
}

std::vector<std::size_t> ForecasterModel::pruned_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < blocks_.size(); ++n)
    if (blocks_[n].pruned()) out.push_back(n);
  return out;
}

ForecasterModel ForecasterModel::clone() const {
  ForecasterModel copy;
  copy.config_ = config_;
  copy.embed_ = spat::clone(embed_);
  copy.position_ = clone_if(position_);
  copy.blocks_.reserve(blocks_.size());
  for (const auto& b : blocks_) {
    AttentionBlock nb;
    if (b.attention) {
      nb.attention = AttentionWeights{spat::clone(b.attention->query),
                                      spat::clone(b.attention->key),
                                      spat::clone(b.attention->value),
                                      spat::clone(b.attention->output)};
    }
    nb.mask = b.mask.clone();
    nb.attn_norm = spat::clone(b.attn_norm);
    nb.ffn_norm = spat::clone(b.ffn_norm);
    nb.ffn_in = spat::clone(b.ffn_in);
    nb.ffn_out = spat::clone(b.ffn_out);
    copy.blocks_.push_back(std::move(nb));
  }
  if (final_norm_.gamma.defined()) copy.final_norm_ = spat::clone(final_norm_);
  copy.head_ = spat::clone(head_);
  copy.training_ = training_;
  copy.dropout_rng_ = dropout_rng_;
  return copy;
}

Tensor dropout(const Tensor& x, const DropoutContext& ctx) {
  if (!ctx.active()) return x;
  const double keep = 1.0 - ctx.rate;
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = canonical(*ctx.rng) < ctx.rate ? 0.0 : 1.0 / keep;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor embed(ForecasterModel& model, const Tensor& x, const DropoutContext& drop) {
  check_input(model.config(), x);
  InstanceStats stats;
  const auto xn = instance_normalize(x, model.config().instance_norm, stats);
  return embed_normalized(model, xn, x.size(0), x.size(2), drop);
}

Tensor multi_head_attention(const AttentionWeights& w, const Tensor& mask, const Tensor& tokens,
                            std::size_t heads, AttentionTrace* trace, std::size_t layer) {
  if (tokens.dim() != 3) {
    throw ShapeError("attention: expected tokens [batch, S, d_model], got " +
                     shape_str(tokens.shape()));
  }
  const std::size_t batch = tokens.size(0), s_count = tokens.size(1), d = tokens.size(2);
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: d_model not divisible by heads");
  const std::size_t dh = d / heads;
  if (mask.shape() != Shape{heads, s_count, s_count}) {
    throw ShapeError("attention: mask shape " + shape_str(mask.shape()) + " does not match " +
                     shape_str({heads, s_count, s_count}));
  }
  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {batch, s_count, heads, dh}), {0, 2, 1, 3});
  };
  const Tensor q = split_heads(apply(w.query, tokens));
  const Tensor k = split_heads(apply(w.key, tokens));
  const Tensor v = split_heads(apply(w.value, tokens));
  const Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor scores = row_softmax(logits);
  const Tensor masked = mul(scores, mask);
  const Tensor heads_out = matmul(masked, v);
  if (trace) {
    if (trace->scores.size() <= layer) {
      trace->scores.resize(layer + 1);
      trace->masked.resize(layer + 1);
      trace->head_outputs.resize(layer + 1);
    }
    trace->scores[layer] = scores;
    trace->masked[layer] = masked;
    trace->head_outputs[layer] = heads_out;
  }
  const Tensor merged = reshape(permute(heads_out, {0, 2, 1, 3}), {batch, s_count, d});
  return apply(w.output, merged);
}

Tensor attention_forward(const AttentionBlock& block, const Tensor& tokens,
                         const BlockContext& ctx) {
  if (block.pruned()) throw ContractError("attention_forward: block is pruned");
  const AttentionWeights& w = *block.attention;
  if (ctx.norm == NormPlacement::pre) {
    const Tensor h = apply(block.attn_norm, tokens);
    const Tensor out = multi_head_attention(w, block.mask, h, ctx.heads, ctx.trace, ctx.layer);
    return add(tokens, dropout(out, ctx.dropout));
  }
  const Tensor out = multi_head_attention(w, block.mask, tokens, ctx.heads, ctx.trace, ctx.layer);
  return apply(block.attn_norm, add(tokens, dropout(out, ctx.dropout)));
}

Tensor block_forward(const AttentionBlock& block, const Tensor& tokens, const BlockContext& ctx) {
  const Tensor mid = block.pruned() ? tokens : attention_forward(block, tokens, ctx);
  auto ffn = [&](const Tensor& h) {
    const Tensor hidden = apply(block.ffn_in, h);
    const Tensor act = ctx.activation == Activation::gelu ? gelu(hidden) : relu(hidden);
    return dropout(apply(block.ffn_out, act), ctx.dropout);
  };
  if (ctx.norm == NormPlacement::pre) return add(mid, ffn(apply(block.ffn_norm, mid)));
  return apply(block.ffn_norm, add(mid, ffn(mid)));
}

Tensor ForecasterModel::forecast(const Tensor& x, AttentionTrace* trace) {
  check_input(config_, x);
  const std::size_t batch = x.size(0);
  const std::size_t channels = x.size(2);
  InstanceStats stats;
  const auto xn = instance_normalize(x, config_.instance_norm, stats);

  DropoutContext drop{config_.dropout, training_ ? &dropout_rng_ : nullptr};
  Tensor tokens = embed_normalized(*this, xn, batch, channels, drop);

  BlockContext ctx;
  ctx.heads = config_.heads;
  ctx.norm = config_.norm;
  ctx.activation = config_.activation;
  ctx.dropout = drop;
  ctx.trace = trace;
  if (trace) {
    trace->scores.assign(blocks_.size(), Tensor());
    trace->masked.assign(blocks_.size(), Tensor());
    trace->head_outputs.assign(blocks_.size(), Tensor());
  }
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    ctx.layer = n;
    tokens = block_forward(blocks_[n], tokens, ctx);
    check_finite(tokens, "after layer " + std::to_string(n));
  }
  if (config_.norm == NormPlacement::pre) tokens = apply(final_norm_, tokens);

  const std::size_t horizon = config_.horizon;
  Tensor per_channel;  // [batch, C, T]
  if (config_.mode == TokenMode::temporal) {
    const std::size_t s_count = tokens.size(1);
    const Tensor flat = reshape(tokens, {batch * channels, s_count * config_.d_model});
    per_channel = reshape(apply(head_, flat), {batch, channels, horizon});
  } else {
    per_channel = apply(head_, tokens);
  }
  Tensor out = permute(per_channel, {0, 2, 1});  // [batch, T, C]
  if (config_.instance_norm) {
    std::vector<double> sd(batch * horizon * channels);
    std::vector<double> mu(batch * horizon * channels);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < horizon; ++t)
        for (std::size_t c = 0; c < channels; ++c) {
          sd[(b * horizon + t) * channels + c] = stats.stdev[b * channels + c];
          mu[(b * horizon + t) * channels + c] = stats.mean[b * channels + c];
        }
    out = add(mul(out, Tensor::from(out.shape(), std::move(sd))),
              Tensor::from(out.shape(), std::move(mu)));
  }
  check_finite(out, "at the forecasting head");
  return out;
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mse_loss: prediction " + shape_str(prediction.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  const Tensor diff = sub(prediction, target);
  return mean(mul(diff, diff));
}

}  // namespace spat
