// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "sakd/finite_diff.hpp"
#include "sakd/policy.hpp"

using namespace sakd;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor(shape, std::move(v));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(PolicyLogits, ZeroParamsGiveHalfRelaxedWeights) {
  PolicyParams p = make_policy(4, 3, 3, 1);
  p.layer.weight = Tensor::zeros(p.layer.weight.shape());
  Rng rng(2);
  const Tensor logits = policy_logits(p, random_tensor({5, 4}, rng), random_tensor({5, 3}, rng));
  EXPECT_EQ(logits.shape(), (Shape{5, 3, 2}));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
  const Tensor r = gumbel_relaxed(logits, Tensor::zeros(logits.shape()), 2.0);
  for (double v : r.values()) EXPECT_EQ(v, 0.5);
}

TEST(PolicyLogits, BatchIndependent) {
  const PolicyParams p = make_policy(4, 3, 3, 1);
  Rng rng(3);
  const Tensor ft = random_tensor({1, 4}, rng), fs = random_tensor({1, 3}, rng);
  const Tensor single = policy_logits(p, ft, fs);
  std::vector<double> tv, sv;
  for (int r = 0; r < 4; ++r) {
    const Tensor ot = r == 2 ? ft : random_tensor({1, 4}, rng);
    const Tensor os = r == 2 ? fs : random_tensor({1, 3}, rng);
    tv.insert(tv.end(), ot.values().begin(), ot.values().end());
    sv.insert(sv.end(), os.values().begin(), os.values().end());
  }
  const Tensor batch = policy_logits(p, Tensor({4, 4}, tv), Tensor({4, 3}, sv));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(batch[2 * 6 + k], single[k]);
}

TEST(PolicyLogits, WidthMismatchIsShapeError) {
  const PolicyParams p = make_policy(4, 3, 3, 1);
  EXPECT_THROW(policy_logits(p, Tensor::zeros({2, 4}), Tensor::zeros({2, 4})), ShapeError);
}

TEST(PolicyLogits, GradientMatchesFiniteDifferences) {
  const PolicyParams p = make_policy(4, 3, 3, 1);
  Rng rng(4);
  const Tensor ft = random_tensor({5, 4}, rng), fs = random_tensor({5, 3}, rng);
  const Tensor noise = sample_gumbel({5, 3, 2}, rng);
  const Tensor c = random_tensor({5, 3, 2}, rng);
  const auto r = finite_diff_check(
      [&](std::span<const Tensor> ps) {
        PolicyParams q = p;
        q.layer.weight = ps[0];
        q.layer.bias = ps[1];
        return sum(mul(gumbel_relaxed(policy_logits(q, ft, fs), noise, 1.3), c));
      },
      {p.layer.weight, p.layer.bias});
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(SampleGumbel, InverseEIsFixedPoint) {
  EXPECT_NEAR(gumbel_transform(std::exp(-1.0)), 0.0, 1e-15);
  EXPECT_TRUE(std::isfinite(gumbel_transform(0.0)));
  EXPECT_TRUE(std::isfinite(gumbel_transform(1.0)));
}

TEST(SampleGumbel, MeanIsEulerMascheroni) {
  Rng rng(5);
  const Tensor g = sample_gumbel({1000000}, rng);
  double s = 0.0;
  for (double v : g.values()) s += v;
  EXPECT_NEAR(s / 1e6, 0.5772156649, 0.01);
}

TEST(SampleGumbel, SameSeedSameNoise) {
  Rng a(6, 12), b(6, 12);
  EXPECT_TRUE(sample_gumbel({4, 3, 2}, a).same_values(sample_gumbel({4, 3, 2}, b)));
}

TEST(GumbelForward, Examples) {
  const Tensor zero = Tensor::zeros({1, 1, 2});
  EXPECT_TRUE(gumbel_forward(Tensor({1, 1, 2}, {std::log(0.9), std::log(0.1)}), zero)
                  .same_values(Tensor({1, 1, 2}, {1, 0})));
  EXPECT_TRUE(gumbel_forward(Tensor({1, 1, 2}, {0.3, 0.3}), zero)
                  .same_values(Tensor({1, 1, 2}, {1, 0})));
  EXPECT_TRUE(gumbel_forward(Tensor({1, 1, 2}, {0.1, 0.9}), zero)
                  .same_values(Tensor({1, 1, 2}, {0, 1})));
}

TEST(GumbelForward, OneHotAndShiftInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor logits = random_tensor({6, 4, 2}, rng, 3.0);
    const Tensor noise = sample_gumbel(logits.shape(), rng);
    const Tensor h = gumbel_forward(logits, noise);
    for (std::size_t i = 0; i < h.size(); i += 2) {
      EXPECT_TRUE(h[i] == 0.0 || h[i] == 1.0);
      EXPECT_EQ(h[i] + h[i + 1], 1.0);
    }
    EXPECT_TRUE(gumbel_forward(add(logits, 3.25), noise).same_values(h));
  }
}

TEST(GumbelForward, NonFiniteScoresAreRejected) {
  EXPECT_THROW(gumbel_forward(Tensor({1, 1, 2}, {NAN, 0}), Tensor::zeros({1, 1, 2})), NumericError);
  EXPECT_THROW(gumbel_forward(Tensor::zeros({1, 2}), Tensor::zeros({1, 2})), ShapeError);
}

TEST(GumbelRelaxed, EqualPerturbedScoresGiveHalf) {
  const Tensor logits({1, 1, 2}, {0.2, 1.2});
  const Tensor noise({1, 1, 2}, {1.0, 0.0});
  for (double tau : {0.1, 1.0, 5.0}) {
    const Tensor r = gumbel_relaxed(logits, noise, tau);
    EXPECT_DOUBLE_EQ(r[0], 0.5);
    EXPECT_DOUBLE_EQ(r[1], 0.5);
  }
}

TEST(GumbelRelaxed, SaturatesAtSmallTau) {
  const Tensor logits({1, 2, 2}, {1.0, 0.0, -0.5, 0.75});
  const Tensor noise = Tensor::zeros({1, 2, 2});
  const Tensor r = gumbel_relaxed(logits, noise, 0.01);
  const Tensor h = gumbel_forward(logits, noise);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_LE(std::abs(r[i] - h[i]), 1e-40);
}

TEST(GumbelRelaxed, UnitTauIsLogistic) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor logits = random_tensor({1, 1, 2}, rng, 2.0);
    const Tensor noise = sample_gumbel({1, 1, 2}, rng);
    const double delta = (logits[0] + noise[0]) - (logits[1] + noise[1]);
    const Tensor r = gumbel_relaxed(logits, noise, 1.0);
    EXPECT_NEAR(r[0], sigmoid(delta), 1e-14);
    EXPECT_NEAR(r[1], 1.0 - sigmoid(delta), 1e-14);
  }
}

TEST(GumbelRelaxed, ChannelsSumToOne) {
  Rng rng(9);
  for (double tau : {0.05, 0.5, 1.0, 5.0}) {
    const Tensor logits = random_tensor({8, 5, 2}, rng, 4.0);
    const Tensor r = gumbel_relaxed(logits, sample_gumbel(logits.shape(), rng), tau);
    for (std::size_t i = 0; i < r.size(); i += 2) EXPECT_NEAR(r[i] + r[i + 1], 1.0, 1e-9);
  }
}

TEST(GumbelRelaxed, NonPositiveTauIsConfigError) {
  EXPECT_THROW(gumbel_relaxed(Tensor::zeros({1, 1, 2}), Tensor::zeros({1, 1, 2}), 0.0), ConfigError);
}

TEST(StraightThrough, ForwardValueIsDiscrete) {
  Rng rng(10);
  const Tensor logits = random_tensor({4, 3, 2}, rng);
  const RoutingDecision d = straight_through(logits, sample_gumbel(logits.shape(), rng), 2.0);
  EXPECT_TRUE(d.value.same_values(d.forward_w));
  for (double v : d.value.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  for (double v : d.relaxed_w.values()) EXPECT_TRUE(v > 0.0 && v < 1.0);
}

TEST(StraightThrough, GradientEqualsRelaxedGradientBitwise) {
  Rng rng(11);
  const Tensor logits0 = random_tensor({4, 3, 2}, rng);
  const Tensor noise = sample_gumbel(logits0.shape(), rng);
  const Tensor c = random_tensor({4, 3}, rng);
  for (double tau : {5.0, 1.0, 0.1}) {
    Tape t1, t2;
    const Tensor l1 = t1.leaf(logits0), l2 = t2.leaf(logits0);
    const GradMap g1 = t1.backward(sum(mul(straight_through(l1, noise, tau).value, c)));
    const GradMap g2 = t2.backward(sum(mul(teacher_channel(gumbel_relaxed(l2, noise, tau)), c)));
    EXPECT_TRUE(g1.at(l1).same_values(g2.at(l2))) << "tau " << tau;
  }
}

TEST(StraightThrough, ForwardInvariantInTauRelaxedSharpens) {
  Rng rng(12);
  const Tensor logits = random_tensor({5, 4, 2}, rng);
  const Tensor noise = sample_gumbel(logits.shape(), rng);
  const RoutingDecision d5 = straight_through(logits, noise, 5.0);
  const RoutingDecision d1 = straight_through(logits, noise, 1.0);
  const RoutingDecision d01 = straight_through(logits, noise, 0.1);
  EXPECT_TRUE(d5.forward_w.same_values(d1.forward_w));
  EXPECT_TRUE(d1.forward_w.same_values(d01.forward_w));
  for (std::size_t i = 0; i < d5.forward_w.size(); ++i) {
    auto chosen = [&](const RoutingDecision& d) {
      return d.forward_w[i] == 1.0 ? d.relaxed_w[i] : 1.0 - d.relaxed_w[i];
    };
    EXPECT_LE(chosen(d5), chosen(d1));
    EXPECT_LE(chosen(d1), chosen(d01));
  }
}

TEST(TauSchedule, Examples) {
  const TauSchedule s = TauSchedule::reaching_floor(60);
  EXPECT_DOUBLE_EQ(tau_at(s, 0), 5.0);
  EXPECT_NEAR(tau_at(s, 59), 0.5, 1e-12);
  EXPECT_EQ(tau_at(s, 100000), 0.5);
  const TauSchedule flat{2.0, 0.5, 1.0};
  EXPECT_EQ(tau_at(flat, 0), 2.0);
  EXPECT_EQ(tau_at(flat, 1000), 2.0);
}

TEST(TauSchedule, MonotoneNonIncreasing) {
  const TauSchedule s = TauSchedule::reaching_floor(240);
  for (std::size_t e = 1; e < 300; ++e) EXPECT_LE(tau_at(s, e), tau_at(s, e - 1));
}

TEST(TauSchedule, ValidationRejectsBadSchedules) {
  EXPECT_THROW((TauSchedule{0.3, 0.5, 0.9}.validate()), ConfigError);
  EXPECT_THROW((TauSchedule{5.0, 0.0, 0.9}.validate()), ConfigError);
  EXPECT_THROW((TauSchedule{5.0, 0.5, 1.1}.validate()), ConfigError);
}
