#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "calpo/gradcheck.hpp"
#include "calpo/policy.hpp"
#include "calpo/training.hpp"

namespace {

using calpo::LabeledSequence;
using calpo::State;
using calpo::TabularPolicy;

TEST(NextTokenDist, Examples) {
  TabularPolicy p(2, 4);
  for (double v : calpo::next_token_dist(p, {1, 2})) EXPECT_DOUBLE_EQ(v, 0.25);
  p.logits({0, calpo::kStartToken})[0] = 10.0;
  const auto d = calpo::next_token_dist(p, {0, calpo::kStartToken});
  EXPECT_NEAR(d[0], std::exp(10.0) / (std::exp(10.0) + 3.0), 1e-15);
  EXPECT_NEAR(d[0], 0.99986, 1e-5);
  EXPECT_NEAR(d[0] + d[1] + d[2] + d[3], 1.0, 1e-12);
  EXPECT_THROW(calpo::next_token_dist(p, {2, 0}), calpo::InvalidInput);
  EXPECT_THROW(calpo::next_token_dist(p, {0, 4}), calpo::InvalidInput);
}

TEST(SmoothedTarget, Examples) {
  const auto y = calpo::smoothed_target(0, 4, 0.1);
  EXPECT_NEAR(y[0], 0.925, 1e-15);
  for (int j = 1; j < 4; ++j) EXPECT_NEAR(y[j], 0.025, 1e-15);
  for (double eps : {0.0, 0.01, 0.3, 0.99}) {
    for (std::size_t k : {2u, 3u, 7u, 50u}) {
      double s = 0;
      for (double v : calpo::smoothed_target(1, k, eps)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(calpo::smoothed_target(0, 4, 1.0), calpo::InvalidInput);
}

TEST(SftLoss, Examples) {
  TabularPolicy uniform(1, 4);
  EXPECT_NEAR(calpo::sft_loss(uniform, 0, std::vector<int>{1, 2, 3}, 0.0), std::log(4.0), 1e-12);
  calpo::Rng rng(41);
  const auto p = calpo::detail::random_policy(rng, 1, 4);
  const std::vector<int> seq{2, 0};
  const double nll = -calpo::seq_logprob(p, 0, seq) / 2.0;
  EXPECT_NEAR(calpo::sft_loss(p, 0, seq, 0.0), nll, 1e-12);
}

TEST(SftGradient, MatchesFiniteDifferences) {
  calpo::Rng rng(42);
  for (int i = 0; i < 50; ++i) {
    const auto p = calpo::detail::random_policy(rng, 2, 4);
    const auto seq = calpo::detail::random_sequence(rng, 3, 4);
    const double eps = i % 2 ? 0.1 : 0.0;
    std::vector<double> g(p.num_parameters(), 0.0);
    calpo::add_sft_gradient(p, 1, seq, eps, g);
    const double err = calpo::detail::policy_fd_error(
        p, g, [&](const TabularPolicy& w) { return calpo::sft_loss(w, 1, seq, eps); });
    EXPECT_LE(err, 1e-6);
  }
}

TEST(Schedule, Examples) {
  const calpo::StepSchedule dim{calpo::ScheduleKind::diminishing, 1.0};
  EXPECT_DOUBLE_EQ(dim.eta(4), 0.5);
  EXPECT_DOUBLE_EQ(dim.eta(1), 1.0);
  const calpo::StepSchedule cst{calpo::ScheduleKind::constant, 0.1};
  EXPECT_DOUBLE_EQ(cst.eta(1000), 0.1);
  EXPECT_THROW(cst.eta(0), calpo::InvalidInput);
}

TEST(GradientStep, Examples) {
  calpo::Rng rng(43);
  auto p = calpo::detail::random_policy(rng, 1, 3);
  const auto before = p;
  std::vector<double> zero(p.num_parameters(), 0.0);
  calpo::apply_gradient_step(p, zero, 1, {calpo::ScheduleKind::constant, 0.1});
  EXPECT_EQ(p, before);
  std::vector<double> g(p.num_parameters());
  for (double& v : g) v = rng.uniform(-1, 1);
  calpo::apply_gradient_step(p, g, 1, {calpo::ScheduleKind::constant, 0.1});
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(p.parameters()[i], before.parameters()[i] - 0.1 * g[i]);
  EXPECT_THROW(calpo::apply_gradient_step(p, std::vector<double>(2), 1, {}), calpo::InvalidInput);
}

TEST(SftTraining, LossDecreasesEveryStep) {
  calpo::Rng rng(44);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 12; ++i) data.push_back({rng.uniform_index(2), calpo::detail::random_sequence(rng, 3, 4)});
  TabularPolicy p(2, 4);
  auto total = [&](const TabularPolicy& w) {
    double s = 0;
    for (const auto& e : data) s += calpo::sft_loss(w, e.prompt, e.tokens, 0.0);
    return s / data.size();
  };
  double prev = total(p);
  for (std::size_t k = 1; k <= 50; ++k) {
    std::vector<double> g(p.num_parameters(), 0.0);
    for (const auto& e : data) calpo::add_sft_gradient(p, e.prompt, e.tokens, 0.0, g, 1.0 / data.size());
    calpo::apply_gradient_step(p, g, k, {calpo::ScheduleKind::constant, 0.01});
    const double now = total(p);
    EXPECT_LT(now, prev) << "step " << k;
    prev = now;
  }
}

TEST(SftTraining, DeterministicUnderSeed) {
  calpo::Rng rng(45);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 40; ++i) data.push_back({rng.uniform_index(3), calpo::detail::random_sequence(rng, 2, 5)});
  calpo::TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 7;
  cfg.seed = 9;
  cfg.schedule = {calpo::ScheduleKind::diminishing, 1.0};
  const auto score = [&](const TabularPolicy& w) { return calpo::mean_nll(w, data); };
  const auto a = calpo::train_sft(TabularPolicy(3, 5), data, cfg, score);
  const auto b = calpo::train_sft(TabularPolicy(3, 5), data, cfg, score);
  EXPECT_EQ(a.policy, b.policy);
  EXPECT_EQ(a.selected_epoch, b.selected_epoch);
  cfg.seed = 10;
  const auto c = calpo::train_sft(TabularPolicy(3, 5), data, cfg, score);
  EXPECT_NE(a.policy, c.policy);
}

TEST(TemperatureScale, SingletonGrid) {
  TabularPolicy p(1, 3);
  const std::vector<LabeledSequence> val{{0, {1}}};
  EXPECT_EQ(calpo::temperature_scale(p, val, std::vector<double>{1.0}), 1.0);
  EXPECT_THROW(calpo::temperature_scale(p, val, std::vector<double>{}), calpo::InvalidInput);
  EXPECT_THROW(calpo::temperature_scale(p, val, std::vector<double>{0.0}), calpo::InvalidInput);
}

TEST(TemperatureScale, RecoversOverconfidenceFactor) {
  calpo::Rng rng(46);
  const auto truth = calpo::detail::random_policy(rng, 6, 4, 1.5);
  std::vector<LabeledSequence> val;
  for (std::size_t x = 0; x < 6; ++x) {
    const auto q = calpo::next_token_dist(truth, {x, calpo::kStartToken});
    for (int i = 0; i < 5000; ++i) val.push_back({x, {static_cast<int>(rng.categorical(q))}});
  }
  const auto hot = truth.scaled(0.1);
  const std::vector<double> grid{1, 5, 10, 20};
  EXPECT_EQ(calpo::temperature_scale(hot, val, grid), 10.0);
  for (double tau : grid) {
    const auto s = hot.scaled(tau);
    for (std::size_t i = 0; i < hot.num_states(); ++i) {
      const State st = hot.state_at(i);
      EXPECT_EQ(calpo::argmax(hot.logits(st)), calpo::argmax(s.logits(st)));
    }
  }
}

TEST(Checkpoint, CsvRoundTrip) {
  calpo::Rng rng(47);
  const auto p = calpo::detail::random_policy(rng, 3, 4);
  const auto csv = calpo::checkpoint_to_csv(p);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "prompt_id,prev_token,logit_0,logit_1,logit_2,logit_3");
  EXPECT_EQ(calpo::checkpoint_from_csv(csv), p);
  EXPECT_THROW(calpo::checkpoint_from_csv("prompt_id,prev_token,logit_0,logit_1\n0,-1,0,0\n"), calpo::InvalidInput);
}

}  // namespace
