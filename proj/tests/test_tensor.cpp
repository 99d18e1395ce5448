// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "sakd/finite_diff.hpp"
#include "sakd/ops.hpp"
#include "sakd/tensor.hpp"

using namespace sakd;

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, ConstantsCarryNoTape) {
  const Tensor t = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_FALSE(t.requires_grad());
  EXPECT_FALSE(add(t, t).requires_grad());
}

TEST(Tape, SumGivesOnes) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::matrix({{1, -2}, {3, 0.5}}));
  const GradMap g = tape.backward(sum(x));
  EXPECT_TRUE(g.at(x).same_values(Tensor::full({2, 2}, 1.0)));
}

TEST(Tape, SquareAtThreeGivesSix) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::scalar(3.0));
  const GradMap g = tape.backward(mul(x, x));
  EXPECT_EQ(g.at(x).item(), 6.0);
}

TEST(Tape, BackwardRequiresScalarOnThisTape) {
  Tape tape, other;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(x), UsageError);
  EXPECT_THROW(other.backward(sum(x)), UsageError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), UsageError);
}

TEST(Tape, MixingTapesIsRejected) {
  Tape a, b;
  const Tensor x = a.leaf(Tensor::vector({1, 2}));
  const Tensor y = b.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(add(x, y), UsageError);
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  Tape tape;
  const Tensor w = tape.leaf(Tensor::matrix({{0.3, -1.1}, {0.7, 0.2}}));
  const Tensor x = Tensor::matrix({{1.5, -0.5}, {0.25, 2.0}});
  const Tensor loss = cross_entropy(relu(matmul(x, w)), std::vector<std::size_t>{1, 0});
  const GradMap g1 = tape.backward(loss);
  const GradMap g2 = tape.backward(loss);
  EXPECT_TRUE(g1 == g2);
}

TEST(Tape, DetachLeavesNoGradientEntry) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2, 3}));
  const Tensor y = tape.leaf(Tensor::vector({4, 5, 6}));
  const GradMap g = tape.backward(add(sum(mul(detach(x), y)), sum(y)));
  EXPECT_FALSE(g.contains(x));
  EXPECT_TRUE(g.contains(y));
}

TEST(Tape, UnreachedLeafHasNoEntry) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  const Tensor unused = tape.leaf(Tensor::vector({1, 2}));
  const GradMap g = tape.backward(sum(x));
  EXPECT_FALSE(g.contains(unused));
  EXPECT_EQ(g.size(), 1u);
}

TEST(Tape, GradientShapeMatchesLeaf) {
  Tape tape;
  const Tensor a = tape.leaf(Tensor::full({3, 4}, 0.5));
  const Tensor b = tape.leaf(Tensor::full({4, 2}, -0.25));
  const GradMap g = tape.backward(sum(matmul(a, b)));
  EXPECT_EQ(g.at(a).shape(), a.shape());
  EXPECT_EQ(g.at(b).shape(), b.shape());
}

TEST(Tape, SharedSubexpressionAccumulates) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({2.0}));
  const Tensor y = scale(x, 3.0);
  const GradMap g = tape.backward(sum(add(y, mul(y, x))));  // 3x + 3x^2 -> 3 + 6x
  EXPECT_DOUBLE_EQ(g.at(x)[0], 15.0);
}

TEST(FiniteDiff, SumIsExact) {
  const auto r = finite_diff_check([](const Tensor& x) { return sum(x); },
                                   Tensor::matrix({{0.1, -3.0}, {7.5, 2.0}}));
  EXPECT_LE(r.max_rel_error, 1e-9);
}

TEST(FiniteDiff, SquareAtOneIsExactForCentralDifferences) {
  const auto r = finite_diff_check([](const Tensor& x) { return mul(x, x); }, Tensor::scalar(1.0));
  EXPECT_LE(r.max_rel_error, 1e-9);
}

TEST(FiniteDiff, RelativeErrorUsesFloor) {
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-10), 1e-10 / 1e-8);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  // detach hides the dependence from the tape but not from the numeric side.
  const auto r = finite_diff_check(
      [](const Tensor& x) { return add(sum(x), sum(mul(detach(x), detach(x)))); },
      Tensor::vector({1.0, 2.0}));
  EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(FiniteDiff, NonFiniteFunctionIsNumericError) {
  EXPECT_THROW(finite_diff_check(
                   [](const Tensor& x) { return scale(sum(x), std::numeric_limits<double>::infinity()); },
                   Tensor::vector({1.0})),
               NumericError);
}
