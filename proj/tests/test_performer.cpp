#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "slim/errors.hpp"
#include "slim/performer.hpp"
#include "test_util.hpp"

namespace slim {
namespace {

using testing::tiny_config;

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), t.row_size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data() + rows[i] * t.row_size(), t.row_size(), out.data() + i * t.row_size());
  return out;
}

TEST(ModelConfig, DerivedSizes) {
  const ModelConfig c = ModelConfig::desk();
  EXPECT_EQ(c.head_dim(), 16u);
  EXPECT_EQ(c.d1(), 16u * 17u * 2u);
  EXPECT_EQ(c.d2(), 16u * 2u + 32u);
  EXPECT_NO_THROW(c.validate());
  const ModelConfig t = tiny_config();
  EXPECT_EQ(t.d1(), 4u * 5u * 2u);
  EXPECT_EQ(t.d2(), 4u * 2u + 8u);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = ModelConfig::desk();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.feature_dim = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.seq_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.block_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.feature_map.kind = FeatureMapKind::kExp;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Params, CountFlattenAndAssign) {
  const ModelConfig c = tiny_config();
  Params p = Params::init(c, 3);
  EXPECT_EQ(p.size(), param_count(c));
  EXPECT_EQ(Params::zeros(ModelConfig::desk()).size(), param_count(ModelConfig::desk()));
  const Tensor flat = p.flatten();
  Params q = Params::zeros(c);
  q.assign(flat.values());
  EXPECT_EQ(q.flatten(), flat);
  EXPECT_THROW(q.assign(std::vector<double>(3)), DimensionError);
}

TEST(Params, InitConvention) {
  const ModelConfig c = tiny_config();
  const Params p = Params::init(c, 4);
  EXPECT_EQ(Params::init(c, 4).flatten(), p.flatten());
  EXPECT_NE(Params::init(c, 5).flatten(), p.flatten());
  p.for_each([](const std::string& name, const Tensor& t) {
    if (name.find("gain") != std::string::npos) {
      for (double v : t.values()) EXPECT_EQ(v, 1.0);
    } else if (t.rank() == 1) {
      for (double v : t.values()) EXPECT_EQ(v, 0.0) << name;
    } else {
      const double a = 1.0 / std::sqrt(double(t.extent(0)));
      for (double v : t.values()) EXPECT_LE(std::abs(v), a) << name;
    }
  });
}

TEST(Params, SerializationRoundTripsBitExactly) {
  ModelConfig c = tiny_config();
  c.ln_eps = 1e-7;
  const Params p = Params::init(c, 6);
  const std::string bytes = serialize_params(c, p);
  ModelConfig c2;
  Params p2;
  deserialize_params(bytes, c2, p2);
  EXPECT_EQ(c2.seq_len, c.seq_len);
  EXPECT_EQ(c2.d1(), c.d1());
  EXPECT_EQ(c2.ln_eps, c.ln_eps);
  EXPECT_EQ(c2.block_size, c.block_size);
  EXPECT_EQ(p2.flatten(), p.flatten());
  EXPECT_EQ(serialize_params(c2, p2), bytes);

  const std::string path = ::testing::TempDir() + "params.bin";
  save_params(path, c, p);
  ModelConfig c3;
  Params p3;
  load_params(path, c3, p3);
  EXPECT_EQ(p3.flatten(), p.flatten());
  std::remove(path.c_str());

  EXPECT_THROW(deserialize_params(bytes.substr(0, bytes.size() - 1), c2, p2), ConfigError);
  EXPECT_THROW(deserialize_params("abc", c2, p2), ConfigError);
}

TEST(Embedding, PositionalEncodingAtZero) {
  const Tensor pe = positional_encoding(0, 1, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(pe(0, c), c % 2 == 0 ? 0.0 : 1.0);
  const Tensor pe5 = positional_encoding(5, 1, 8);
  EXPECT_DOUBLE_EQ(pe5(0, 0), std::sin(5.0));
  EXPECT_DOUBLE_EQ(pe5(0, 3), std::cos(5.0 / std::pow(10000.0, 2.0 / 8.0)));
}

TEST(Embedding, AbsolutePositions) {
  const ModelConfig c = tiny_config(10);
  const Params p = Params::init(c, 7);
  Rng rng(1);
  const std::vector<int> tokens = testing::random_tokens(rng, 10, c.vocab);
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, p);
  const Tensor whole = embed(pv, tokens, 0).value();
  const Tensor part = embed(pv, std::span<const int>(tokens).subspan(4, 3), 4).value();
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t ch = 0; ch < c.d_model; ++ch) EXPECT_EQ(part(l, ch), whole(4 + l, ch));

  const std::vector<int> same{3, 3};
  const Tensor e = embed(pv, same, 0).value();
  const Tensor pe = positional_encoding(0, 2, c.d_model);
  for (std::size_t ch = 0; ch < c.d_model; ++ch)
    EXPECT_NEAR(e(1, ch) - e(0, ch), pe(1, ch) - pe(0, ch), 1e-15);

  const std::vector<int> bad{static_cast<int>(c.vocab)};
  EXPECT_THROW(embed(pv, bad, 0), DimensionError);
}

struct LayerFixture {
  ModelConfig cfg = tiny_config(9);
  Params params = Params::init(cfg, 11);
  Rng rng{12};
  Tensor x = testing::random_tensor(rng, {9, 8});
};

TEST(LayerF, ShapesAndRowwise) {
  LayerFixture f;
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, f.params);
  const LayerFOutput out = layer_F(tape.constant(f.x), pv.layers[0], f.cfg);
  EXPECT_EQ(out.t.shape(), (Shape{9, f.cfg.d1()}));
  EXPECT_EQ(out.gamma.shape(), (Shape{9, f.cfg.d2()}));

  const std::vector<std::size_t> perm{3, 0, 8, 1, 7, 2, 6, 5, 4};
  const LayerFOutput permuted = layer_F(tape.constant(take_rows(f.x, perm)), pv.layers[0], f.cfg);
  EXPECT_EQ(permuted.t.value(), take_rows(out.t.value(), perm));
  EXPECT_EQ(permuted.gamma.value(), take_rows(out.gamma.value(), perm));

  const std::vector<std::size_t> subset{2, 5};
  const LayerFOutput sub = layer_F(tape.constant(take_rows(f.x, subset)), pv.layers[0], f.cfg);
  EXPECT_EQ(sub.t.value(), take_rows(out.t.value(), subset));

  const LayerFOutput zero = layer_F(tape.constant(Tensor({9, 8})), pv.layers[0], f.cfg);
  EXPECT_EQ(zero.t.value(), Tensor({9, f.cfg.d1()}));
  EXPECT_EQ(zero.gamma.value(), Tensor({9, f.cfg.d2()}));
}

TEST(LayerF, PackingOrder) {
  LayerFixture f;
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, f.params);
  const LayerFOutput out = layer_F(tape.constant(f.x), pv.layers[0], f.cfg);
  const std::size_t m = f.cfg.feature_dim, d = f.cfg.head_dim(), w = f.cfg.front_width();
  for (std::size_t j = 0; j < f.cfg.heads; ++j) {
    const Tensor k = square(matmul(f.x, f.params.layers[0].wk[j]));
    const Tensor v = matmul(f.x, f.params.layers[0].wv[j]);
    const Tensor q = square(matmul(f.x, f.params.layers[0].wq[j]));
    for (std::size_t l = 0; l < 9; ++l) {
      for (std::size_t c = 0; c < m; ++c) {
        EXPECT_EQ(out.t.value()(l, j * w + c), k(l, c));
        EXPECT_EQ(out.gamma.value()(l, f.cfg.d_model + j * m + c), q(l, c));
      }
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < m; ++c) EXPECT_EQ(out.t.value()(l, j * w + m + i * m + c), v(l, i) * k(l, c));
    }
  }
  for (std::size_t l = 0; l < 9; ++l)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.gamma.value()(l, c), f.x(l, c));
}

// One layer written directly from the model equations with the tensor-level
// attention oracle.
Tensor reference_layer(const Tensor& x, const LayerParams& lp, const ModelConfig& cfg) {
  const std::size_t len = x.rows(), d = cfg.head_dim();
  Tensor attn({len, cfg.d_model});
  for (std::size_t j = 0; j < cfg.heads; ++j) {
    const Tensor y = attn_linear_ps(matmul(x, lp.wq[j]), matmul(x, lp.wk[j]), matmul(x, lp.wv[j]), FeatureMap{});
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < d; ++i) attn(l, j * d + i) = y(l, i);
  }
  const Tensor h = add(layer_norm(attn, lp.ln1_gain, lp.ln1_bias, cfg.ln_eps), x);
  const Tensor ffn = add_row_broadcast(matmul(gelu(add_row_broadcast(matmul(h, lp.w1), lp.b1)), lp.w2), lp.b2);
  return add(layer_norm(ffn, lp.ln2_gain, lp.ln2_bias, cfg.ln_eps), h);
}

TEST(LayerG, ComposesToReferenceLayer) {
  LayerFixture f;
  Rng rng(13);
  // Non-trivial gains and biases so every parameter participates.
  f.params.for_each([&](const std::string&, Tensor& t) {
    if (t.rank() == 1)
      for (double& v : t.values()) v = rng.uniform(0.5, 1.5);
  });
  Tape tape;
  const ParamVars pv = bind_constant_params(tape, f.params);
  const LayerFOutput fo = layer_F(tape.constant(f.x), pv.layers[1], f.cfg);
  const Var out = layer_G(prefix_sum(fo.t), fo.gamma, pv.layers[1], f.cfg);
  EXPECT_EQ(out.shape(), (Shape{9, 8}));
  EXPECT_LT(relative_l2(out.value(), reference_layer(f.x, f.params.layers[1], f.cfg)), 1e-13);

  const std::vector<std::size_t> perm{8, 7, 6, 5, 4, 3, 2, 1, 0};
  const Tensor u = prefix_sum(fo.t).value();
  const Var permuted = layer_G(tape.constant(take_rows(u, perm)), tape.constant(take_rows(fo.gamma.value(), perm)),
                               pv.layers[1], f.cfg);
  EXPECT_EQ(permuted.value(), take_rows(out.value(), perm));
  EXPECT_THROW(layer_G(fo.t, fo.t, pv.layers[1], f.cfg), DimensionError);
}

TEST(ForwardFull, UniformLogitsGiveLogTwo) {
  ModelConfig c = tiny_config(6);
  c.vocab = 2;
  Params p = Params::init(c, 1);
  p.w_out.fill(0.0);
  const std::vector<int> tokens{0, 1, 1, 0, 1, 0};
  EXPECT_NEAR(forward_full(tokens, p, c, full_mask(6)).loss, std::log(2.0), 1e-15);
}

TEST(ForwardFull, LastMaskEntryIsIgnored) {
  const ModelConfig c = tiny_config();
  const Params p = Params::init(c, 2);
  Rng rng(3);
  const auto tokens = testing::random_tokens(rng, 8, c.vocab);
  LossMask mask = full_mask(8);
  const double a = model_loss(tokens, p, c, mask);
  mask[7] = 123.0;
  EXPECT_EQ(model_loss(tokens, p, c, mask), a);
}

TEST(ForwardFull, Errors) {
  const ModelConfig c = tiny_config();
  const Params p = Params::init(c, 2);
  const std::vector<int> one{1};
  EXPECT_THROW(forward_full(one, p, c, full_mask(1)), ConfigError);
  const std::vector<int> bad{1, 99};
  EXPECT_THROW(forward_full(bad, p, c, full_mask(2)), DimensionError);
  const std::vector<int> ok{1, 2, 3};
  EXPECT_THROW(forward_full(ok, p, c, full_mask(2)), DimensionError);
}

TEST(ForwardFull, GradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config(8);
  const Params p = Params::init(c, 21);
  Rng rng(22);
  const auto tokens = testing::random_tokens(rng, 8, c.vocab);
  const LossMask mask = full_mask(8);
  const Tensor grad = forward_full(tokens, p, c, mask).grad.flatten();
  Tensor flat = p.flatten();
  Params work = p;
  auto loss_at = [&](const Tensor& x) {
    work.assign(x.values());
    return model_loss(tokens, work, c, mask, AttentionMode::kPrefixSum);
  };
  for (int s = 0; s < 20; ++s) {
    const std::size_t i = rng.below(flat.numel());
    const double fd = testing::central_difference(loss_at, flat, i, 1e-6);
    EXPECT_LT(testing::rel_err(grad[i], fd, 1e-7), 1e-5) << "coordinate " << i;
  }
}

TEST(ForwardFull, BlockAndPrefixSumModesAgree) {
  ModelConfig c = tiny_config(12);
  c.block_size = 5;
  const Params p = Params::init(c, 31);
  Rng rng(32);
  const auto tokens = testing::random_tokens(rng, 12, c.vocab);
  const auto a = forward_full(tokens, p, c, full_mask(12), AttentionMode::kPrefixSum);
  const auto b = forward_full(tokens, p, c, full_mask(12), AttentionMode::kBlock);
  EXPECT_LT(std::abs(a.loss - b.loss), 1e-13);
  EXPECT_LT(relative_l2(a.grad.flatten(), b.grad.flatten()), 1e-12);
}

TEST(LossSlice, ChunkSumsEqualWholeLoss) {
  const ModelConfig c = tiny_config(10);
  const Params p = Params::init(c, 41);
  Rng rng(42);
  const auto tokens = testing::random_tokens(rng, 10, c.vocab);
  LossMask mask = full_mask(10);
  mask[2] = 0.0;
  mask[6] = 0.5;
  const Tensor logits = model_logits(tokens, p, c);
  const double whole = loss_slice(logits, tokens, 0, mask);
  EXPECT_EQ(whole, model_loss(tokens, p, c, mask));
  double chunked = 0;
  for (std::size_t a = 0; a < 10; a += 3) {
    const std::size_t n = std::min<std::size_t>(3, 10 - a);
    const Tensor rows = Tensor::from_values({n, c.vocab}, logits.values().subspan(a * c.vocab, n * c.vocab));
    chunked += loss_slice(rows, tokens, a, mask);
  }
  EXPECT_NEAR(chunked, whole, 1e-12);
  EXPECT_EQ(loss_slice(logits, tokens, 0, LossMask(10, 0.0)), 0.0);
}

}  // namespace
}  // namespace slim
