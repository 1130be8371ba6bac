#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "spat/errors.hpp"
#include "spat/model.hpp"
#include "support.hpp"

using namespace spat;
using spat::test::check_gradient;
using spat::test::random_batch;
using spat::test::random_tensor;
using spat::test::tiny_temporal;
using spat::test::tiny_variate;

namespace {

Tensor linear(const Linear& l, const Tensor& x) { return add(matmul(x, l.weight), l.bias); }

// Attention with no mask at all, assembled from the same primitives.
Tensor unmasked_attention(const AttentionWeights& w, const Tensor& x, std::size_t heads) {
  const std::size_t b = x.size(0), s = x.size(1), d = x.size(2), dh = d / heads;
  auto split = [&](const Tensor& t) { return permute(reshape(t, {b, s, heads, dh}), {0, 2, 1, 3}); };
  const Tensor q = split(linear(w.query, x));
  const Tensor k = split(linear(w.key, x));
  const Tensor v = split(linear(w.value, x));
  const Tensor a = row_softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(dh))));
  return linear(w.output, reshape(permute(matmul(a, v), {0, 2, 1, 3}), {b, s, d}));
}

// Pre-norm feed-forward sublayer alone: the block with its attention replaced by the identity.
Tensor ffn_only(const AttentionBlock& blk, const Tensor& x, Activation act) {
  const Tensor h = layer_norm(x, blk.ffn_norm.gamma, blk.ffn_norm.beta);
  const Tensor hidden = linear(blk.ffn_in, h);
  return add(x, linear(blk.ffn_out, act == Activation::gelu ? gelu(hidden) : relu(hidden)));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.to_vector() == b.to_vector();
}

}  // namespace

TEST(ModelConfig, TokenCounts) {
  ModelConfig c;
  c.lookback = 16;
  c.patch_len = 16;
  c.patch_stride = 8;
  c.end_padding = false;
  EXPECT_EQ(c.token_count(), 1u);
  c.end_padding = true;
  EXPECT_EQ(c.token_count(), 2u);
  c.lookback = 336;
  c.end_padding = false;
  EXPECT_EQ(c.token_count(), 41u);
  c.mode = TokenMode::variate;
  c.channels = 7;
  EXPECT_EQ(c.token_count(), 7u);
  c.lookback = 96;
  EXPECT_EQ(c.token_count(), 7u);
}

TEST(ModelConfig, ValidationErrors) {
  ModelConfig c;
  c.lookback = 8;
  c.patch_len = 16;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.d_model = 10;
  c.heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.heads = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(ForecasterModel(c, 1), ConfigError);
}

TEST(Embed, ShapesPerMode) {
  std::mt19937_64 rng(1);
  ForecasterModel t(tiny_temporal(), 1);
  const Tensor x = random_tensor({3, 16, 2}, rng);
  EXPECT_EQ(embed(t, x, {}).shape(), (Shape{6, 8, 8}));
  ForecasterModel v(tiny_variate(3), 1);
  EXPECT_EQ(embed(v, random_tensor({2, 12, 3}, rng), {}).shape(), (Shape{2, 3, 8}));
}

TEST(Attention, AllOnesMaskEqualsUnmaskedBitwise) {
  std::mt19937_64 rng(2);
  ForecasterModel m(tiny_temporal(), 3);
  const Tensor x = random_tensor({4, 8, 8}, rng);
  const auto& blk = m.blocks()[0];
  EXPECT_TRUE(bitwise_equal(multi_head_attention(*blk.attention, blk.mask, x, 2),
                            unmasked_attention(*blk.attention, x, 2)));
}

TEST(Attention, ZeroMaskAnnihilatesHeadOutputs) {
  std::mt19937_64 rng(3);
  ForecasterModel m(tiny_temporal(), 3);
  const Tensor x = random_tensor({2, 8, 8}, rng);
  AttentionTrace trace;
  const auto& blk = m.blocks()[0];
  multi_head_attention(*blk.attention, Tensor::zeros(blk.mask.shape()), x, 2, &trace, 0);
  for (double v : trace.head_outputs[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, TwoTokenHandComputation) {
  // H=1, d=2, identity projections with zero biases: Q=K=V=x.
  auto ident = [] {
    return Linear{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
  };
  const AttentionWeights w{ident(), ident(), ident(), ident()};
  const Tensor x = Tensor::from({1, 2, 2}, {1, 0, 0, 2});
  const Tensor out = multi_head_attention(w, Tensor::ones({1, 2, 2}), x, 1);
  // logits row 0: [1, 0]/sqrt2, row 1: [0, 4]/sqrt2
  const double r = 1.0 / std::sqrt(2.0);
  const double a00 = std::exp(r) / (std::exp(r) + 1.0);
  const double a11 = std::exp(4 * r) / (std::exp(4 * r) + 1.0);
  const std::vector<double> want = {a00 * 1.0, (1 - a00) * 2.0, (1 - a11) * 1.0, a11 * 2.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.data()[i], want[i], 1e-15);
}

TEST(Block, PrunedBlockWithZeroFfnAndIdentityNormIsIdentity) {
  std::mt19937_64 rng(4);
  ForecasterModel m(tiny_temporal(), 5);
  AttentionBlock& blk = m.blocks()[0];
  m.prune_layer(0);
  for (auto* t : {&blk.ffn_out.weight, &blk.ffn_out.bias}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
  const Tensor x = random_tensor({2, 8, 8}, rng);
  BlockContext ctx;
  ctx.heads = 2;
  EXPECT_TRUE(bitwise_equal(block_forward(blk, x, ctx), x));
}

TEST(Block, PrunedBlockIsFeedForwardOnly) {
  std::mt19937_64 rng(5);
  ForecasterModel m(tiny_temporal(), 6);
  m.prune_layer(1);
  const Tensor x = random_tensor({3, 8, 8}, rng);
  BlockContext ctx;
  ctx.heads = 2;
  EXPECT_TRUE(bitwise_equal(block_forward(m.blocks()[1], x, ctx),
                            ffn_only(m.blocks()[1], x, Activation::gelu)));
  EXPECT_THROW(attention_forward(m.blocks()[1], x, ctx), ContractError);
}

TEST(Block, ZeroOutputProjectionMatchesPruned) {
  std::mt19937_64 rng(6);
  ForecasterModel m(tiny_temporal(), 7);
  ForecasterModel zeroed = m.clone();
  for (auto* t : {&zeroed.blocks()[0].attention->output.weight,
                  &zeroed.blocks()[0].attention->output.bias}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
  m.prune_layer(0);
  const Tensor x = random_tensor({2, 16, 2}, rng);
  EXPECT_TRUE(bitwise_equal(m.forecast(x), zeroed.forecast(x)));
}

TEST(Block, PrunedAndUnprunedDifferOnlyThroughAttention) {
  std::mt19937_64 rng(7);
  ForecasterModel m(tiny_temporal(), 8);
  ForecasterModel p = m.clone();
  p.prune_layer(0);
  const Tensor x = random_tensor({2, 8, 8}, rng);
  BlockContext ctx;
  ctx.heads = 2;
  const Tensor full = block_forward(m.blocks()[0], x, ctx);
  const Tensor pruned = block_forward(p.blocks()[0], x, ctx);
  // Unpruned block = FFN applied to (x + MHA(LN(x))).
  const auto& blk = m.blocks()[0];
  const Tensor mid = add(x, multi_head_attention(*blk.attention, blk.mask,
                                                 layer_norm(x, blk.attn_norm.gamma,
                                                            blk.attn_norm.beta),
                                                 2));
  EXPECT_TRUE(bitwise_equal(full, ffn_only(blk, mid, Activation::gelu)));
  EXPECT_TRUE(bitwise_equal(pruned, ffn_only(blk, x, Activation::gelu)));
  EXPECT_FALSE(bitwise_equal(full, pruned));
}

TEST(Forecast, ShapeFinitenessAndDeterminism) {
  std::mt19937_64 rng(8);
  ModelConfig c = tiny_temporal();
  c.horizon = 4;
  c.channels = 1;
  ForecasterModel m(c, 9);
  const Tensor x = random_tensor({1, 16, 1}, rng);
  const Tensor y = m.forecast(x);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 1}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_TRUE(bitwise_equal(y, m.forecast(x)));
}

TEST(Forecast, VariateZeroInputZeroBiasesGivesZeroPreHead) {
  ModelConfig c = tiny_variate(3);
  c.instance_norm = false;
  c.norm = NormPlacement::pre;
  ForecasterModel m(c, 10);
  for (auto& [name, t] : m.parameters()) {
    if (name.size() >= 5 && (name.ends_with(".bias") || name.ends_with(".beta"))) {
      for (double& v : t.mutable_data()) v = 0.0;
    }
  }
  const Tensor y = m.forecast(Tensor::zeros({2, 12, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forecast, TemporalModeIsChannelIndependent) {
  std::mt19937_64 rng(9);
  ModelConfig c = tiny_temporal();
  ForecasterModel m(c, 11);
  const Tensor x = random_tensor({2, 16, 3}, rng);
  const Tensor xp = permute(x, {0, 1, 2});  // copy
  std::vector<double> swapped(x.numel());
  const std::vector<std::size_t> perm = {2, 0, 1};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t ch = 0; ch < 3; ++ch) swapped[(b * 16 + t) * 3 + ch] = x.at({b, t, perm[ch]});
  const Tensor y = m.forecast(xp);
  const Tensor ys = m.forecast(Tensor::from(x.shape(), swapped));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(ys.at({b, t, ch}), y.at({b, t, perm[ch]}));
}

TEST(Forecast, RejectsBadInput) {
  ForecasterModel v(tiny_variate(3), 1);
  EXPECT_THROW(v.forecast(Tensor::zeros({1, 12, 4})), ShapeError);
  EXPECT_THROW(v.forecast(Tensor::zeros({1, 11, 3})), ShapeError);
  std::vector<double> bad(12 * 3, 0.0);
  bad[5] = std::nan("");
  EXPECT_THROW(v.forecast(Tensor::from({1, 12, 3}, bad)), NumericError);
}

TEST(Forecast, NonFiniteActivationsNameTheLayer) {
  ForecasterModel m(tiny_temporal(), 12);
  for (double& v : m.blocks()[1].ffn_out.weight.mutable_data()) v = std::numeric_limits<double>::max();
  std::mt19937_64 rng(10);
  try {
    m.forecast(random_tensor({1, 16, 2}, rng));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(Loss, MseHandAndLoopOracle) {
  EXPECT_EQ(mse_loss(Tensor::from({2}, {1, -1}), Tensor::from({2}, {0, 0})).item(), 1.0);
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({2, 3, 2}, rng);
  EXPECT_EQ(mse_loss(a, a).item(), 0.0);
  const Tensor b = random_tensor({2, 3, 2}, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  EXPECT_NEAR(mse_loss(a, b).item(), acc / 12.0, 1e-12);
  EXPECT_THROW(mse_loss(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST(Mask, GradientIsNonzeroForGenericWeights) {
  std::mt19937_64 rng(12);
  ForecasterModel m(tiny_temporal(), 13);
  const auto batch = random_batch(m.config(), 2, 2, rng);
  for (auto& b : m.blocks()) b.mask.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(mse_loss(m.forecast(batch.inputs), batch.targets));
  }
  for (auto& b : m.blocks()) {
    ASSERT_TRUE(b.mask.has_grad());
    double norm = 0.0;
    for (double g : b.mask.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0);
  }
}

struct GradCase {
  const char* name;
  ModelConfig config;
};

class ForecasterGradient : public ::testing::TestWithParam<int> {};

// Full loss gradient with respect to every parameter and every mask.
TEST_P(ForecasterGradient, MatchesCentralDifferences) {
  ModelConfig c = tiny_temporal(2);
  c.d_model = 16;
  c.heads = 4;
  std::size_t channels = 2;
  switch (GetParam()) {
    case 0: break;
    case 1: c.norm = NormPlacement::post; c.activation = Activation::relu; break;
    case 2: c = tiny_variate(8, 2); c.d_model = 16; c.heads = 2; channels = 8; break;
    case 3: c.instance_norm = false; c.end_padding = false; break;
  }
  ASSERT_LE(c.token_count(channels), 8u);
  ForecasterModel m(c, 20 + GetParam());
  std::mt19937_64 rng(30 + GetParam());
  const auto batch = random_batch(c, 2, channels, rng);
  auto loss = [&] { return mse_loss(m.forecast(batch.inputs), batch.targets); };

  auto state = m.state();
  for (auto& [name, t] : state) {
    const auto r = check_gradient(loss, t);
    EXPECT_LT(r.max_rel_error, 1e-4) << name << ": analytic " << r.worst_analytic << " numeric "
                                     << r.worst_numeric;
    t.set_requires_grad(name.find(".mask") == std::string::npos);
    t.zero_grad();
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, ForecasterGradient, ::testing::Range(0, 4));

TEST(Prune, RemovesExactlyAttentionWeights) {
  for (std::size_t d : {8u, 16u, 128u}) {
    ModelConfig c = tiny_temporal(3);
    c.d_model = d;
    c.d_ff = 2 * d;
    ForecasterModel m(c, 1);
    const std::size_t before = m.parameter_count();
    const auto retained = m.parameters();
    std::vector<std::vector<double>> snapshot;
    for (const auto& [name, t] : retained) snapshot.push_back(t.to_vector());
    m.prune_layer(1);
    EXPECT_EQ(before - m.parameter_count(), 4 * d * d + 4 * d);
    for (std::size_t i = 0; i < retained.size(); ++i) {
      EXPECT_EQ(retained[i].second.to_vector(), snapshot[i]) << retained[i].first;
    }
    EXPECT_THROW(m.prune_layer(1), ContractError);
    EXPECT_THROW(m.prune_layer(3), ContractError);
    EXPECT_EQ(m.pruned_layers(), (std::vector<std::size_t>{1}));
  }
}

TEST(Clone, SharesNoStorage) {
  ForecasterModel m(tiny_temporal(), 2);
  ForecasterModel c = m.clone();
  const auto a = m.state();
  const auto b = c.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_NE(a[i].second.node().get(), b[i].second.node().get());
    EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector());
  }
}

TEST(Dropout, ActiveOnlyInTrainingAndSeeded) {
  std::mt19937_64 rng(13);
  ModelConfig c = tiny_temporal();
  c.dropout = 0.3;
  ForecasterModel m(c, 3);
  const Tensor x = random_tensor({2, 16, 2}, rng);
  const Tensor eval1 = m.forecast(x);
  m.set_training(true);
  m.seed_dropout(99);
  const Tensor t1 = m.forecast(x);
  m.seed_dropout(99);
  const Tensor t2 = m.forecast(x);
  m.set_training(false);
  EXPECT_TRUE(bitwise_equal(t1, t2));
  EXPECT_FALSE(bitwise_equal(t1, eval1));
  EXPECT_TRUE(bitwise_equal(eval1, m.forecast(x)));
}
