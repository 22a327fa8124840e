// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "m3jepa/core/gradcheck.hpp"
#include "m3jepa/core/ops.hpp"

using namespace m3jepa;

namespace {

NArray random_array(Shape shape, std::mt19937_64& rng, bool learnable = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  NArray a(std::move(shape));
  for (auto& v : a.data()) v = dist(rng);
  a.set_requires_grad(learnable);
  return a;
}

// Reverse-mode gradient of `loss_fn` with respect to `p`.
NArray tape_grad(const std::function<NArray()>& loss_fn, NArray& p) {
  p.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  tape.backward(loss_fn());
  return NArray(p.shape(), std::vector<double>(p.grad().begin(), p.grad().end()));
}

void expect_grad_matches(const std::function<NArray()>& loss_fn, NArray& p) {
  const NArray analytic = tape_grad(loss_fn, p);
  const NArray numeric = finite_diff_grad([&] { return loss_fn().item(); }, p, 1e-5);
  EXPECT_LT(relative_error(analytic.data(), numeric.data()), 1e-4);
}

}  // namespace

TEST(NArray, ShapeInvariants) {
  NArray a(Shape{2, 3});
  EXPECT_EQ(a.size(), 6u);
  EXPECT_FALSE(a.has_grad());
  a.set_requires_grad(true);
  EXPECT_EQ(a.grad().size(), a.size());
  EXPECT_THROW(NArray(Shape{2, 0}), DimensionError);
  EXPECT_THROW(NArray(Shape{2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityZeroAndHandExample) {
  const auto b = NArray::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(NArray::identity(2), b).values(), b.values());
  EXPECT_EQ(matmul(NArray(Shape{2, 2}), b).values(), std::vector<double>(6, 0.0));
  const auto c = matmul(NArray::matrix(2, 2, {1, 2, 3, 4}), NArray::matrix(2, 1, {1, 1}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.values(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(NArray(Shape{2, 3}), NArray(Shape{2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Softmax, Examples) {
  auto y = softmax(NArray::vector({0, 0}));
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  y = softmax(NArray::vector({std::log(2.0), 0}));
  EXPECT_NEAR(y.at(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at(1), 1.0 / 3.0, 1e-15);
  y = softmax(NArray::vector({1000, 0}));
  EXPECT_NEAR(y.at(0), 1.0, 1e-12);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
  EXPECT_THROW(softmax(NArray::vector({NAN, 0})), NumericError);
  EXPECT_THROW(softmax(NArray::vector({INFINITY, 0})), NumericError);
}

TEST(Softmax, SumsToOneAndPermutationEquivariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_array(Shape{7}, rng, false);
    for (auto& v : x.data()) v *= 20.0;
    const auto y = softmax(x);
    EXPECT_NEAR(std::accumulate(y.data().begin(), y.data().end(), 0.0), 1.0, 1e-12);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    NArray xp(Shape{7});
    for (std::size_t i = 0; i < 7; ++i) xp.at(i) = x.at(perm[i]);
    const auto yp = softmax(xp);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(yp.at(i), y.at(perm[i]));
  }
}

TEST(Gelu, Examples) {
  EXPECT_EQ(gelu(NArray::vector({0.0})).at(0), 0.0);
  EXPECT_NEAR(gelu(NArray::vector({10.0})).at(0), 10.0, 1e-9);
  // 40-digit erf evaluation of 1·Φ(1).
  EXPECT_NEAR(gelu(NArray::vector({1.0})).at(0), 0.8413447460685429485852, 1e-12);
}

TEST(CosineSim, Examples) {
  const auto a = NArray::vector({0.3, -1.2, 2.0});
  EXPECT_NEAR(cosine_sim(a, a).item(), 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(NArray::vector({1, 0}), NArray::vector({0, 1})).item(), 0.0);
  EXPECT_NEAR(cosine_sim(NArray::vector({1, 1}), NArray::vector({1, 0})).item(), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_sim(NArray::vector({0, 0}), NArray::vector({1, 0})), DegenerateVectorError);
}

TEST(SqL2, Examples) {
  const auto a = NArray::vector({0.3, -1.2});
  EXPECT_EQ(sq_l2(a, a).item(), 0.0);
  EXPECT_EQ(sq_l2(NArray::vector({1, 0}), NArray::vector({0, 0})).item(), 1.0);
  EXPECT_EQ(sq_l2(NArray::vector({1, 2}), NArray::vector({3, 1})).item(), 5.0);
  EXPECT_THROW(sq_l2(NArray::vector({1, 2}), NArray::vector({3})), DimensionError);
}

TEST(Concat, ExamplesAndBackward) {
  EXPECT_EQ(concat({NArray::vector({1}), NArray::vector({2, 3})}).values(), (std::vector<double>{1, 2, 3}));
  const auto single = NArray::vector({4, 5});
  EXPECT_EQ(concat({single}).values(), single.values());
  EXPECT_THROW(concat({}), PreconditionError);

  auto a = NArray::vector({1, 2});
  auto b = NArray::vector({3, 4, 5});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(concat({a, b})));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), std::vector<double>(2, 1.0));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), std::vector<double>(3, 1.0));
}

TEST(Backward, AnalyticCases) {
  auto x = NArray::scalar(3.0);
  x.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    // Fan-out: x used twice accumulates both contributions.
    tape.backward(mul(x, x));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

  auto w = NArray::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  w.set_requires_grad(true);
  const auto v = NArray::vector({0.5, -1.0, 2.0});
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(matmul(w, v)));
  }
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(w.grad()[r * 3 + c], v.at(c));
}

TEST(Backward, RejectsNonScalarAndUnrecordedLoss) {
  auto x = NArray::vector({1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), DimensionError);
  EXPECT_THROW(tape.backward(NArray::scalar(1.0)), PreconditionError);
}

TEST(Backward, NoTapeRecordsNothing) {
  auto x = NArray::vector({1, 2});
  x.set_requires_grad(true);
  const auto y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, ScalarExamples) {
  auto x = NArray::scalar(1.0);
  EXPECT_NEAR(finite_diff_grad([&] { return x.at(0) * x.at(0); }, x, 1e-5).at(0), 2.0, 1e-8);
  x.at(0) = 0.0;
  EXPECT_NEAR(finite_diff_grad([&] { return std::sin(x.at(0)); }, x, 1e-5).at(0), 1.0, 1e-9);
  EXPECT_THROW(finite_diff_grad([&] { return 0.0; }, x, 0.0), PreconditionError);
}

// Every differentiable op against central differences on random small shapes.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  auto a = random_array(Shape{3, 4}, rng);
  auto b = random_array(Shape{4, 2}, rng);
  auto c = random_array(Shape{3, 4}, rng);
  auto v = random_array(Shape{4}, rng);
  auto u = random_array(Shape{4}, rng);
  auto w = random_array(Shape{3, 2}, rng);

  // Weighted sums keep gradients of linear-invariant ops non-trivial.
  auto weighted = [&](const NArray& x) {
    NArray coef(x.shape());
    for (std::size_t i = 0; i < coef.size(); ++i) coef.at(i) = 0.3 + 0.1 * static_cast<double>(i % 7);
    return sum(mul(x, coef));
  };

  expect_grad_matches([&] { return weighted(matmul(a, b)); }, a);
  expect_grad_matches([&] { return weighted(matmul(a, b)); }, b);
  expect_grad_matches([&] { return weighted(transpose(a)); }, a);
  expect_grad_matches([&] { return weighted(add(a, c)); }, c);
  expect_grad_matches([&] { return weighted(sub(a, c)); }, c);
  expect_grad_matches([&] { return weighted(mul(a, c)); }, a);
  expect_grad_matches([&] { return weighted(add_row(a, v)); }, v);
  expect_grad_matches([&] { return weighted(softmax(a)); }, a);
  expect_grad_matches([&] { return weighted(gelu(a)); }, a);
  expect_grad_matches([&] { return cosine_sim(u, v); }, u);
  expect_grad_matches([&] { return cosine_sim(u, v); }, v);
  expect_grad_matches([&] { return sq_l2(u, v); }, v);
  expect_grad_matches([&] { return weighted(row_sq_dist(a, c)); }, a);
  expect_grad_matches([&] { return weighted(concat({a, c})); }, c);
  expect_grad_matches([&] { return weighted(gather_rows(a, {2, 0, 2})); }, a);
  expect_grad_matches([&] { return weighted(take_along_rows(a, {{1, 3}, {0, 0}, {2, 1}})); }, a);
  expect_grad_matches([&] { return weighted(normalize_rows_l2(a)); }, a);
  expect_grad_matches([&] { return cross_entropy(a, {1, 3, 0}); }, a);

  auto pos = random_array(Shape{3, 4}, rng);
  for (auto& x : pos.data()) x = 0.1 + std::abs(x);
  expect_grad_matches([&] { return weighted(normalize_rows_l1(pos)); }, pos);

  auto e0 = random_array(Shape{2, 2}, rng);
  auto e1 = random_array(Shape{1, 2}, rng);
  std::vector<Route> routes{{0, 1}, {1, 0}, {0, 0}, {0, 1}, {1, 0}, {1, 0}};
  auto mix = [&] { return weighted(mix_experts({e0, e1}, w, routes)); };
  expect_grad_matches(mix, w);
  expect_grad_matches(mix, e0);
  expect_grad_matches(mix, e1);
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, OpGradient, ::testing::Range(0, 5));

TEST(Dropout, InvertedScalingAndDeterminism) {
  NArray x(Shape{1000}, 1.0);
  std::mt19937_64 r1(9), r2(9);
  const auto y1 = dropout(x, 0.25, r1);
  const auto y2 = dropout(x, 0.25, r2);
  EXPECT_EQ(y1.values(), y2.values());
  for (double v : y1.data()) EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-15);
  std::mt19937_64 r3(9);
  EXPECT_TRUE(dropout(x, 0.0, r3).same_storage(x));
}

TEST(Tape, TracksTouchedLeaves) {
  auto p = NArray::vector({1, 2});
  auto q = NArray::vector({3, 4});
  p.set_requires_grad(true);
  q.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  auto loss = sum(scale(p, 2.0));
  EXPECT_TRUE(tape.touched(p));
  EXPECT_FALSE(tape.touched(q));
  tape.backward(loss);
  EXPECT_FALSE(q.has_grad() && q.grad()[0] != 0.0);
}
