// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "sakd/routing.hpp"

using namespace sakd;

namespace {

Tensor random_input(std::size_t b, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(b * d);
  for (double& x : v) x = rng.normal();
  return Tensor({b, d}, std::move(v));
}

RoutingNetwork make_pair(std::size_t blocks, std::size_t wt, std::size_t ws, std::uint64_t seed) {
  const NetworkSpec t = uniform_spec(5, blocks, wt, 4), s = uniform_spec(5, blocks, ws, 4);
  return RoutingNetwork{freeze(build_network(t, seed)), build_network(s, seed + 1),
                        make_adaptions(t, s, seed + 2), make_policy(wt, ws, blocks + 1, seed + 3)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(RoutingForward, AllTeacherReproducesTeacherLogits) {
  const RoutingNetwork rn = make_pair(3, 8, 4, 1);
  const Tensor x = random_input(6, 5, 2);
  const Tensor out = routing_forward(rn, x, Tensor::full({6, 4}, 1.0));
  EXPECT_LE(max_abs_diff(out, forward_features(rn.teacher, x).logits), 1e-12);
}

TEST(RoutingForward, AllStudentReproducesStudentLogits) {
  const RoutingNetwork rn = make_pair(3, 8, 4, 1);
  const Tensor x = random_input(6, 5, 2);
  const Tensor out = routing_forward(rn, x, Tensor::full({6, 4}, 0.0));
  EXPECT_LE(max_abs_diff(out, forward_features(rn.student, x).logits), 1e-12);
}

TEST(RoutingForward, IdenticalTwinsAgreeForEveryDecision) {
  const NetworkSpec spec = uniform_spec(5, 2, 6, 4);
  const Network net = build_network(spec, 7);
  const RoutingNetwork rn{freeze(net), net, make_adaptions(spec, spec, 1),
                          make_policy(6, 6, 3, 1)};
  const Tensor x = random_input(1, 5, 3);
  const Tensor expected = forward_features(net, x).logits;
  for (unsigned mask = 0; mask < 8; ++mask) {
    const Tensor w({1, 3}, {double(mask & 1), double((mask >> 1) & 1), double((mask >> 2) & 1)});
    EXPECT_LE(max_abs_diff(routing_forward(rn, x, w), expected), 1e-12) << "decision " << mask;
  }
}

TEST(RoutingForward, WrongSpotCountIsConfigError) {
  const RoutingNetwork rn = make_pair(2, 6, 3, 1);
  EXPECT_THROW(routing_forward(rn, random_input(2, 5, 1), Tensor::full({2, 4}, 1.0)), ConfigError);
  EXPECT_THROW(routing_forward(rn, random_input(2, 5, 1), Tensor::full({3, 3}, 1.0)), ShapeError);
}

TEST(RoutingForward, Deterministic) {
  const RoutingNetwork rn = make_pair(3, 8, 4, 5);
  const Tensor x = random_input(4, 5, 2);
  const Tensor w({4, 4}, {1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 0, 1});
  EXPECT_TRUE(routing_forward(rn, x, w).same_values(routing_forward(rn, x, w)));
}

TEST(RoutingLoss, ReachesOnlyPolicyAndAdaptions) {
  const RoutingNetwork base = make_pair(3, 8, 4, 11);
  Tape tape;
  RoutingNetwork rn = base;
  rn.student = bind(tape, base.student);
  rn.adaptions = bind_params(tape, base.adaptions);
  rn.policy = bind_params(tape, base.policy);
  const Tensor x = random_input(6, 5, 4);
  const FeatureBundle ft = forward_features(rn.teacher, x);
  const FeatureBundle fs = forward_features(rn.student, x);
  Rng rng(1, 12);
  const Tensor logits = policy_logits(rn.policy, ft.block_features.back(),
                                      detach(fs.block_features.back()));
  const RoutingDecision d = straight_through(logits, sample_gumbel(logits.shape(), rng), 1.0);
  const std::vector<std::size_t> y = {0, 1, 2, 3, 0, 1};
  const GradMap g = tape.backward(routing_loss(routing_forward(rn, x, d), y, 1.0));
  for (const Tensor* p : param_list(rn.student)) EXPECT_FALSE(g.contains(*p));
  for (const Tensor* p : param_list(rn.teacher)) EXPECT_FALSE(g.contains(*p));
  std::size_t reached = 0;
  for (const Tensor* p : param_list(rn.policy)) reached += g.contains(*p);
  EXPECT_EQ(reached, 2u);
  reached = 0;
  for (const Tensor* p : param_list(rn.adaptions)) reached += g.contains(*p);
  EXPECT_GT(reached, 0u);
}

TEST(RoutingLoss, ZeroFactorGivesZero) {
  const Tensor logits = Tensor::matrix({{1, 2, 3}, {0, 0, 5}});
  const std::vector<std::size_t> y = {0, 1};
  EXPECT_EQ(routing_loss(logits, y, 0.0).item(), 0.0);
  EXPECT_DOUBLE_EQ(routing_loss(logits, y, 1.0).item(), cross_entropy(logits, y).item());
  EXPECT_THROW(routing_loss(logits, y, -1.0), ConfigError);
}

TEST(RoutingNetwork, ValidationCatchesMismatchedPairs) {
  RoutingNetwork rn = make_pair(3, 8, 4, 1);
  EXPECT_NO_THROW(rn.validate());
  rn.policy = make_policy(8, 4, 3, 1);
  EXPECT_THROW(rn.validate(), ConfigError);
  RoutingNetwork other = make_pair(3, 8, 4, 1);
  other.student = build_network(uniform_spec(5, 2, 4, 4), 1);
  EXPECT_THROW(other.validate(), ConfigError);
}
