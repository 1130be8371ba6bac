#pragma once

// Encoder-only transformer forecaster with maskable, removable multi-head
// attention. Two tokenizations are supported:
//   temporal tokens: channel-independent patches, channels folded into batch
//   variate tokens:  each channel's whole lookback window is one token
//
// Every block carries a binary connection mask of shape [H, S, S] that
// multiplies the softmaxed attention scores. Pruning a block deletes its
// attention weights and turns the attention sublayer into the identity; the
// feed-forward sublayer is kept.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spat/tensor.hpp"

namespace spat {

enum class TokenMode { temporal, variate };
enum class Activation { gelu, relu };
enum class NormPlacement { pre, post };

std::string to_string(TokenMode mode);
std::string to_string(Activation act);
std::string to_string(NormPlacement norm);
TokenMode parse_token_mode(const std::string& s);
Activation parse_activation(const std::string& s);
NormPlacement parse_norm_placement(const std::string& s);

struct ModelConfig {
  TokenMode mode = TokenMode::temporal;
  std::size_t lookback = 96;
  std::size_t horizon = 24;
  std::size_t channels = 7;
  std::size_t d_model = 16;
  std::size_t d_ff = 128;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t patch_len = 16;
  std::size_t patch_stride = 8;
  bool end_padding = true;
  double dropout = 0.2;
  Activation activation = Activation::gelu;
  NormPlacement norm = NormPlacement::pre;
  bool instance_norm = true;

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t d_head() const { return d_model / heads; }
  // S: patches per channel (temporal) or channel count (variate).
  std::size_t token_count() const;
  std::size_t token_count(std::size_t input_channels) const;

  bool operator==(const ModelConfig&) const = default;
};

// Row-major weight of shape [in, out] plus bias [out]: y = x W + b.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

struct AttentionBlock {
  std::optional<AttentionWeights> attention;  // absent once pruned
  Tensor mask;                                // [H, S, S], entries in {0, 1}
  LayerNormParams attn_norm;
  LayerNormParams ffn_norm;
  Linear ffn_in;
  Linear ffn_out;

  bool pruned() const { return !attention.has_value(); }
};

struct ForecastBatch {
  Tensor inputs;   // [batch, L, C]
  Tensor targets;  // [batch, T, C]
};

// Intermediate attention tensors captured during a forward pass. Indexed by
// layer; entries stay undefined for pruned layers.
struct AttentionTrace {
  std::vector<Tensor> scores;        // A  = softmax(QK^T / sqrt(d_head)), [B', H, S, S]
  std::vector<Tensor> masked;        // A' = A * M
  std::vector<Tensor> head_outputs;  // O  = A' V, [B', H, S, d_head]
};

// Dropout source. A null generator means evaluation mode.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;

  bool active() const { return rng != nullptr && rate > 0.0; }
};

using NamedTensor = std::pair<std::string, Tensor>;

class ForecasterModel {
 public:
  ForecasterModel(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  std::vector<AttentionBlock>& blocks() { return blocks_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }
  Linear& embedding() { return embed_; }
  Tensor& position() { return position_; }
  LayerNormParams& final_norm() { return final_norm_; }
  Linear& head() { return head_; }

  // Trainable tensors in a fixed order with stable names.
  std::vector<NamedTensor> parameters() const;
  // Parameters plus per-layer masks; everything a checkpoint stores.
  std::vector<NamedTensor> state() const;
  std::size_t parameter_count() const;

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // x: [batch, L, C] -> [batch, T, C].
  Tensor forecast(const Tensor& x, AttentionTrace* trace = nullptr);

  // Deletes the attention weights of `layer`. Throws ContractError if the
  // layer is already pruned or out of range.
  void prune_layer(std::size_t layer);
  std::vector<std::size_t> pruned_layers() const;

  // Deep copy: no tensor storage is shared with the original.
  ForecasterModel clone() const;

 private:
  ForecasterModel() = default;

  ModelConfig config_;
  Linear embed_;
  Tensor position_;  // [S, d_model], temporal mode only
  std::vector<AttentionBlock> blocks_;
  LayerNormParams final_norm_;  // pre-norm only
  Linear head_;
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

// Instance-normalized input tokens projected to d_model.
// Temporal: [batch*C, S, d_model]. Variate: [batch, C, d_model].
Tensor embed(ForecasterModel& model, const Tensor& x, const DropoutContext& dropout);

// Multi-head attention core: per head softmax(QK^T/sqrt(d_head)) * M, value
// aggregation, concatenation and output projection. No residual.
Tensor multi_head_attention(const AttentionWeights& weights, const Tensor& mask,
                            const Tensor& tokens, std::size_t heads,
                            AttentionTrace* trace = nullptr, std::size_t layer = 0);

struct BlockContext {
  std::size_t heads = 1;
  NormPlacement norm = NormPlacement::pre;
  Activation activation = Activation::gelu;
  DropoutContext dropout;
  AttentionTrace* trace = nullptr;
  std::size_t layer = 0;
};

// Attention sublayer with residual and normalization. Requires an unpruned block.
Tensor attention_forward(const AttentionBlock& block, const Tensor& tokens,
                         const BlockContext& ctx);

// Attention sublayer (identity when pruned) followed by the feed-forward sublayer.
Tensor block_forward(const AttentionBlock& block, const Tensor& tokens, const BlockContext& ctx);

// Mean of squared errors over every element.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

Tensor dropout(const Tensor& x, const DropoutContext& ctx);

}  // namespace spat
