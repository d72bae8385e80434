#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "calpo/gradcheck.hpp"
#include "calpo/preference.hpp"

namespace {

using calpo::CalibrationTerm;
using calpo::PreferencePair;
using calpo::TabularPolicy;

// Sets the policy so that the DPO margin of a 1-token pair equals m (beta = 1).
TabularPolicy with_margin(double m) {
  TabularPolicy p(1, 2);
  auto row = p.logits({0, calpo::kStartToken});
  row[0] = m;
  return p;
}

TEST(SeqLogprob, Examples) {
  TabularPolicy uniform(2, 5);
  const std::vector<int> seq{1, 3, 4};
  EXPECT_NEAR(calpo::seq_logprob(uniform, 1, seq), 3 * std::log(1.0 / 5), 1e-12);

  TabularPolicy det(1, 3);
  det.logits({0, calpo::kStartToken})[2] = 800;
  det.logits({0, 2})[0] = 800;
  EXPECT_NEAR(calpo::seq_logprob(det, 0, std::vector<int>{2, 0}), 0.0, 1e-12);

  calpo::Rng rng(31);
  const auto pol = calpo::detail::random_policy(rng, 2, 4);
  const std::vector<int> s{3, 0, 2};
  double prod = 1.0;
  int prev = calpo::kStartToken;
  for (int t : s) {
    prod *= calpo::next_token_dist(pol, {1, prev})[static_cast<std::size_t>(t)];
    prev = t;
  }
  EXPECT_NEAR(std::exp(calpo::seq_logprob(pol, 1, s)), prod, 1e-12);
  EXPECT_THROW(calpo::seq_logprob(pol, 0, std::vector<int>{4}), calpo::InvalidInput);
  EXPECT_THROW(calpo::seq_logprob(pol, 2, std::vector<int>{1}), calpo::InvalidInput);
}

TEST(DpoLoss, Examples) {
  const PreferencePair pair{0, {0}, {1}};
  TabularPolicy ref(1, 2);
  EXPECT_NEAR(calpo::dpo_loss(ref, ref, pair, 0.1), std::log(2.0), 1e-12);
  EXPECT_NEAR(calpo::preference_score(with_margin(1.0), ref, pair, 1.0).dpo_margin, 1.0, 1e-15);
  EXPECT_NEAR(calpo::dpo_loss(with_margin(1.0), ref, pair, 1.0), std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(calpo::dpo_loss(with_margin(1.0), ref, pair, 1.0), 0.3132616875, 1e-10);
  double prev = 1e9;
  for (double m = -5; m <= 40; m += 0.5) {
    const double l = calpo::dpo_loss(with_margin(m), ref, pair, 1.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-15);
  EXPECT_THROW(calpo::dpo_loss(ref, ref, pair, 0.0), calpo::InvalidInput);
  EXPECT_THROW(calpo::dpo_loss(ref, ref, PreferencePair{0, {1}, {1}}, 1.0), calpo::InvalidInput);
}

TEST(PreferenceScore, MarginIsDifference) {
  calpo::Rng rng(32);
  for (int i = 0; i < 100; ++i) {
    const auto p = calpo::detail::random_policy(rng, 3, 5);
    const auto r = calpo::detail::random_policy(rng, 3, 5);
    const auto pair = calpo::detail::random_pair(rng, 3, 5, 3);
    const auto s = calpo::preference_score(p, r, pair, 0.3);
    EXPECT_EQ(s.dpo_margin, s.r_plus - s.r_minus);
    EXPECT_NEAR(calpo::dpo_loss(p, p, pair, 0.3), std::log(2.0), 1e-12);
  }
}

TEST(JointLoss, LambdaZeroIsDpo) {
  calpo::Rng rng(33);
  const auto p = calpo::detail::random_policy(rng, 2, 4);
  const auto r = calpo::detail::random_policy(rng, 2, 4);
  const auto pair = calpo::detail::random_pair(rng, 2, 4, 3);
  EXPECT_EQ(calpo::joint_loss(p, r, pair, 0.1, 0.0), calpo::dpo_loss(p, r, pair, 0.1));
  EXPECT_THROW(calpo::joint_loss(p, r, pair, 0.1, -0.1), calpo::InvalidInput);
}

TEST(JointLoss, OneTokenPairByHand) {
  TabularPolicy p(1, 3);
  auto row = p.logits({0, calpo::kStartToken});
  row[0] = 1.0;
  row[1] = 0.2;
  row[2] = -0.5;
  TabularPolicy ref(1, 3);
  const PreferencePair pair{0, {0}, {2}};
  const auto probs = calpo::softmax(std::vector<double>{1.0, 0.2, -0.5});
  const double c = probs[0];
  const double z_plus = 1 / (1 + std::exp(-(probs[0] - probs[1])));
  const double z_minus = 1 / (1 + std::exp(-(probs[2] - probs[0])));
  const double cal_plus = z_plus * (1 - c) + (1 - z_plus) * c;
  const double t_minus = 1 - z_minus;
  const double cal_minus = t_minus * (1 - c) + (1 - t_minus) * c;
  EXPECT_NEAR(calpo::joint_loss(p, ref, pair, 0.5, 1.0),
              calpo::dpo_loss(p, ref, pair, 0.5) + cal_plus + cal_minus, 1e-15);
}

TEST(JointLoss, LinearInLambda) {
  calpo::Rng rng(34);
  for (int i = 0; i < 200; ++i) {
    const auto p = calpo::detail::random_policy(rng, 2, 4);
    const auto r = calpo::detail::random_policy(rng, 2, 4);
    const auto pair = calpo::detail::random_pair(rng, 2, 4, 1 + rng.uniform_index(4));
    const double lam = rng.uniform(0, 3);
    const double j0 = calpo::joint_loss(p, r, pair, 0.2, 0.0);
    const double j1 = calpo::joint_loss(p, r, pair, 0.2, 1.0);
    EXPECT_NEAR(calpo::joint_loss(p, r, pair, 0.2, lam) - j0, lam * (j1 - j0), 1e-12);
  }
}

TEST(JointGradient, MatchesFiniteDifferences) {
  calpo::Rng rng(35);
  for (auto term : {CalibrationTerm::none, CalibrationTerm::l1_surrogate, CalibrationTerm::bce}) {
    for (int i = 0; i < 30; ++i) {
      const auto p = calpo::detail::random_policy(rng, 2, 4);
      const auto r = calpo::detail::random_policy(rng, 2, 4);
      const auto pair = calpo::detail::random_pair(rng, 2, 4, 3);
      std::vector<double> g(p.num_parameters(), 0.0);
      calpo::add_joint_gradient(p, r, pair, 0.5, 0.7, g, 1.0, term);
      const double err = calpo::detail::policy_fd_error(p, g, [&](const TabularPolicy& w) {
        return calpo::joint_loss_frozen_targets(w, p, r, pair, 0.5, 0.7, term);
      });
      EXPECT_LE(err, 1e-6);
    }
  }
}

TEST(LambdaBound, Examples) {
  EXPECT_DOUBLE_EQ(calpo::lambda_bound(1.0, 4), 0.5);
  EXPECT_DOUBLE_EQ(calpo::lambda_bound(0.2, 1), 0.4);
  EXPECT_DOUBLE_EQ(calpo::lambda_bound(0.3, 6), calpo::lambda_bound(0.3, 3) / 2);
  EXPECT_THROW(calpo::lambda_bound(0.0, 4), calpo::InvalidInput);
  EXPECT_THROW(calpo::lambda_bound(1.0, 0), calpo::InvalidInput);
}

TEST(Perturbation, ZeroCasesAndBound) {
  calpo::Rng rng(36);
  const auto p = calpo::detail::random_policy(rng, 2, 4);
  const auto pair = calpo::detail::random_pair(rng, 2, 4, 4);
  EXPECT_EQ(calpo::cal_margin_perturbation(p, pair, 0.0), 0.0);
  // Every state uniform over two tokens: margin 0 so the target is 0.5 everywhere.
  TabularPolicy flat(1, 2);
  EXPECT_EQ(calpo::cal_margin_perturbation(flat, PreferencePair{0, {0, 1}, {1, 1}}, 0.3), 0.0);
  for (int i = 0; i < 10000; ++i) {
    const auto q = calpo::detail::random_policy(rng, 2, 4, 4.0);
    const auto pr = calpo::detail::random_pair(rng, 2, 4, 4);
    EXPECT_LE(calpo::cal_margin_perturbation(q, pr, 0.1), 0.2);
    EXPECT_DOUBLE_EQ(calpo::perturbation_bound(pr, 0.1), 0.2);
  }
}

}  // namespace
