#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "slim/autograd.hpp"
#include "slim/errors.hpp"
#include "slim/rng.hpp"
#include "test_util.hpp"

namespace slim {
namespace {

using Builder = std::function<Var(std::span<const Var>)>;

// Compares tape gradients of a scalar function of several inputs with central
// differences, coordinate by coordinate.
void expect_gradients_match(const Builder& build, std::vector<Tensor> inputs, double tol = 1e-7) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const Var out = build(leaves);
  const GradMap grads = tape.backward(out);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& x) {
      Tape t2;
      std::vector<Var> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(t2.leaf(j == k ? x : inputs[j]));
      return build(vars).value()[0];
    };
    const Tensor numeric = testing::numeric_gradient(f, inputs[k]);
    const Tensor& analytic = grads.at(leaves[k]);
    ASSERT_EQ(analytic.shape(), inputs[k].shape());
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
      EXPECT_LT(testing::rel_err(analytic[i], numeric[i], 1e-6), tol)
          << "input " << k << " coordinate " << i << ": " << analytic[i] << " vs " << numeric[i];
    }
  }
}

// A fixed random projection to a scalar, so every output entry matters.
Var project(const Var& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  const Var w = x.tape().constant(rng.uniform_tensor(x.shape(), -1, 1));
  return dot(x, w);
}

TEST(Autograd, ElementwiseOps) {
  Rng rng(1);
  const Tensor a = testing::random_tensor(rng, {3, 4});
  const Tensor b = testing::random_tensor(rng, {3, 4});
  expect_gradients_match([](auto v) { return project(add(v[0], v[1])); }, {a, b});
  expect_gradients_match([](auto v) { return project(sub(v[0], v[1])); }, {a, b});
  expect_gradients_match([](auto v) { return project(mul(v[0], v[1])); }, {a, b});
  expect_gradients_match([](auto v) { return project(scale(v[0], -2.5)); }, {a});
  expect_gradients_match([](auto v) { return project(square(v[0])); }, {a});
  expect_gradients_match([](auto v) { return project(gelu(v[0])); }, {a});
}

TEST(Autograd, MatmulAndBroadcast) {
  Rng rng(2);
  const Tensor a = testing::random_tensor(rng, {3, 5});
  const Tensor b = testing::random_tensor(rng, {5, 2});
  const Tensor r = testing::random_tensor(rng, {2});
  expect_gradients_match([](auto v) { return project(matmul(v[0], v[1])); }, {a, b});
  expect_gradients_match([](auto v) { return project(add_row_broadcast(matmul(v[0], v[1]), v[2])); },
                         {a, b, r});
}

TEST(Autograd, LayerNorm) {
  Rng rng(3);
  const Tensor x = testing::random_tensor(rng, {4, 6}, -2, 2);
  const Tensor g = testing::random_tensor(rng, {6}, 0.5, 1.5);
  const Tensor b = testing::random_tensor(rng, {6});
  expect_gradients_match([](auto v) { return project(layer_norm(v[0], v[1], v[2], 1e-5)); }, {x, g, b},
                         1e-6);
}

TEST(Autograd, PrefixSumPlainAndSeeded) {
  Rng rng(4);
  const Tensor x = testing::random_tensor(rng, {5, 3});
  const Tensor seed = testing::random_tensor(rng, {1, 3});
  expect_gradients_match([](auto v) { return project(prefix_sum(v[0])); }, {x});
  expect_gradients_match([](auto v) { return project(prefix_sum(v[0], v[1])); }, {x, seed});
}

TEST(Autograd, SlicesAndConcat) {
  Rng rng(5);
  const Tensor a = testing::random_tensor(rng, {3, 2});
  const Tensor b = testing::random_tensor(rng, {3, 4});
  expect_gradients_match(
      [](auto v) {
        const std::vector<Var> parts{v[0], v[1]};
        return project(concat_cols(parts));
      },
      {a, b});
  expect_gradients_match([](auto v) { return project(slice_cols(v[0], 1, 2)); }, {b});
  expect_gradients_match([](auto v) { return project(slice_rows(v[0], 1, 2)); }, {b});
  expect_gradients_match([](auto v) { return sum(v[0]); }, {b});
}

TEST(Autograd, RowwiseAttentionPieces) {
  Rng rng(6);
  const Tensor a = testing::random_tensor(rng, {4, 3});
  const Tensor b = testing::random_tensor(rng, {4, 2});
  const Tensor r = testing::random_tensor(rng, {4, 6});
  const Tensor den = testing::random_tensor(rng, {4, 1}, 0.5, 2.0);
  expect_gradients_match([](auto v) { return project(row_outer(v[0], v[1])); }, {a, b});
  expect_gradients_match([](auto v) { return project(row_matvec(v[0], v[1])); }, {r, b});
  expect_gradients_match([](auto v) { return project(row_dot(v[0], v[1])); }, {a, a});
  expect_gradients_match([](auto v) { return project(guarded_row_divide(v[0], v[1], 1e-16)); }, {a, den});
}

TEST(Autograd, RowOuterLayout) {
  Tape tape;
  const Var a = tape.leaf(Tensor({1, 2}, {1, 2}));
  const Var b = tape.leaf(Tensor({1, 3}, {3, 4, 5}));
  EXPECT_EQ(row_outer(a, b).value(), Tensor({1, 6}, {3, 4, 5, 6, 8, 10}));
  const Var r = tape.leaf(Tensor({1, 6}, {1, 0, 0, 0, 1, 0}));
  EXPECT_EQ(row_matvec(r, b).value(), Tensor({1, 2}, {3, 4}));
}

TEST(Autograd, GuardedDivideClampsAndCounts) {
  alloc_stats().reset_clamp_events();
  Tape tape;
  const Var num = tape.leaf(Tensor({2, 1}, {1.0, 2.0}));
  const Var den = tape.leaf(Tensor({2, 1}, {0.0, 4.0}));
  const Var y = guarded_row_divide(num, den, 1e-16);
  EXPECT_EQ(y.value()[0], 1e16);
  EXPECT_EQ(y.value()[1], 0.5);
  EXPECT_EQ(alloc_stats().clamp_events(), 1);
  const GradMap g = tape.backward(sum(y));
  EXPECT_EQ(g.at(den)[0], 0.0);
  EXPECT_EQ(g.at(den)[1], -2.0 / 16.0);
  alloc_stats().reset_clamp_events();
}

TEST(Autograd, CrossEntropy) {
  Rng rng(7);
  const Tensor logits = testing::random_tensor(rng, {4, 5}, -3, 3);
  const std::vector<int> targets{0, 4, 2, 1};
  const std::vector<double> weights{1.0, 0.5, 0.0, 2.0};
  expect_gradients_match([&](auto v) { return cross_entropy(v[0], targets, weights); }, {logits}, 1e-6);

  Tape tape;
  const Var uniform = tape.leaf(Tensor({1, 2}, {0.3, 0.3}));
  const std::vector<int> t{1};
  const std::vector<double> w{1.0};
  EXPECT_NEAR(cross_entropy(uniform, t, w).value()[0], std::log(2.0), 1e-15);
}

TEST(Autograd, EmbeddingGathersAndScatters) {
  Rng rng(8);
  const Tensor table = testing::random_tensor(rng, {5, 3});
  const std::vector<int> ids{4, 0, 4};
  expect_gradients_match([&](auto v) { return project(embedding(v[0], ids)); }, {table});
  Tape tape;
  const Var t = tape.leaf(table);
  const std::vector<int> bad{5};
  EXPECT_THROW(embedding(t, bad), DimensionError);
}

TEST(Autograd, StopGradientBlocksFlow) {
  Tape tape;
  const Var x = tape.leaf(Tensor({1, 2}, {1.0, 2.0}));
  const Var y = dot(stop_gradient(x), x);
  const GradMap g = tape.backward(y);
  EXPECT_EQ(g.at(x), Tensor({1, 2}, {1.0, 2.0}));
}

TEST(Autograd, ParameterSinksAccumulateAcrossTapes) {
  const Tensor w({1, 2}, {3.0, 4.0});
  Tensor sink({1, 2});
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    const Var p = tape.parameter(w, &sink);
    tape.backward(dot(p, p));
  }
  EXPECT_EQ(sink, Tensor({1, 2}, {12.0, 16.0}));
  Tape tape;
  Tensor wrong({2});
  EXPECT_THROW(tape.parameter(w, &wrong), DimensionError);
}

TEST(Autograd, ErrorsAndRelease) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(x), TapeError);
  Tape other;
  const Var y = other.leaf(Tensor({2}, {1, 2}));
  EXPECT_THROW(add(x, y), TapeError);

  const auto before = alloc_stats().live_bytes();
  {
    Tape t;
    const Var a = t.leaf(Tensor({100}, 1.0));
    const Var s = sum(square(a));
    t.backward(s);
    EXPECT_GT(t.live_bytes(), 0u);
    t.release();
    EXPECT_TRUE(t.released());
    EXPECT_EQ(t.size(), 0u);
    t.release();
    EXPECT_THROW(t.leaf(Tensor({1})), TapeError);
  }
  EXPECT_EQ(alloc_stats().live_bytes(), before);
}

TEST(Autograd, UnreachedLeavesGetZeroGradient) {
  Tape tape;
  const Var a = tape.leaf(Tensor({2}, {1, 2}));
  const Var b = tape.leaf(Tensor({2}, {3, 4}));
  const GradMap g = tape.backward(sum(a));
  EXPECT_EQ(g.at(b), Tensor({2}));
  EXPECT_EQ(g.at(a), Tensor({2}, {1, 1}));
}

}  // namespace
}  // namespace slim
