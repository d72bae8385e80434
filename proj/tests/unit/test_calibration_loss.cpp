#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "calpo/calibration_loss.hpp"
#include "calpo/gradcheck.hpp"
#include "calpo/rng.hpp"

namespace {

using calpo::TokenContext;
using calpo::TargetMode;

TEST(Margin, Examples) {
  EXPECT_NEAR(calpo::margin({{0.7, 0.2, 0.1}, 0}), 0.5, 1e-15);
  EXPECT_NEAR(calpo::margin({{0.1, 0.9}, 0}), -0.8, 1e-15);
  EXPECT_EQ(calpo::margin({{0.25, 0.25, 0.25, 0.25}, 2}), 0.0);
  EXPECT_EQ(calpo::margin_detail({{0.2, 0.4, 0.4}, 0}).competitor, 1u);
  EXPECT_THROW(calpo::margin({{1.0}, 0}), calpo::InvalidInput);
  EXPECT_THROW(calpo::margin({{0.5, 0.5}, 2}), calpo::InvalidInput);
}

TEST(Surrogate, Examples) {
  EXPECT_EQ(calpo::surrogate({{0.5, 0.5}, 0}), 0.5);
  EXPECT_NEAR(calpo::surrogate({{0.7, 0.2, 0.1}, 0}), 0.6224593312, 1e-10);
  EXPECT_NEAR(calpo::surrogate({{0.7, 0.2, 0.1}, 0}), 1.0 / (1.0 + std::exp(-0.5)), 1e-15);
  const double a = calpo::surrogate({{0.6, 0.4}, 0});
  const double b = calpo::surrogate({{0.6, 0.4}, 1});
  EXPECT_NEAR(a + b, 1.0, 1e-15);
}

TEST(TokenCalLoss, Examples) {
  for (double c : {0.0, 0.3, 1.0}) EXPECT_EQ(calpo::token_cal_loss(0.5, c), 0.5);
  const double z = 1.0 / (1.0 + std::exp(-0.5));
  EXPECT_NEAR(calpo::token_cal_loss(z, 0.7), z * 0.3 + (1 - z) * 0.7, 1e-15);
  EXPECT_NEAR(calpo::token_cal_loss(0.6224593312, 0.7), 0.45101626752, 1e-10);
  EXPECT_THROW(calpo::token_cal_loss(1.1, 0.5), calpo::InvalidInput);
  EXPECT_THROW(calpo::token_cal_loss(0.5, -0.1), calpo::InvalidInput);
}

TEST(TokenCalLoss, SymmetryAffinityAndGradientBound) {
  calpo::Rng rng(21);
  for (int i = 0; i < 100000; ++i) {
    const double z = rng.uniform(), c = rng.uniform();
    EXPECT_NEAR(calpo::token_cal_loss(z, c) + calpo::token_cal_loss(1 - z, c), 1.0, 1e-15);
    EXPECT_LE(std::abs(1.0 - 2.0 * z), 1.0);
    if (i < 1000) {
      const double h = 0.01;
      if (c > h && c < 1 - h) {
        const double d2 = calpo::token_cal_loss(z, c + h) - 2 * calpo::token_cal_loss(z, c) +
                          calpo::token_cal_loss(z, c - h);
        EXPECT_LE(std::abs(d2), 1e-12);
      }
    }
  }
}

TEST(Surrogate, DirectionAndOrdering) {
  calpo::Rng rng(22);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 5000; ++i) {
    const auto p = calpo::softmax(calpo::detail::random_logits(rng, 2 + rng.uniform_index(5)));
    const TokenContext ctx{p, rng.uniform_index(p.size())};
    const double m = calpo::margin(ctx), s = calpo::surrogate(ctx);
    EXPECT_EQ(s > 0.5, m > 0.0);
    EXPECT_EQ(s < 0.5, m < 0.0);
    pts.emplace_back(m, s);
  }
  std::sort(pts.begin(), pts.end());
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_GE(pts[i].second, pts[i - 1].second);
}

TEST(SeqCalLoss, ReducesAndAverages) {
  const TokenContext t{{0.7, 0.2, 0.1}, 0};
  const std::vector<TokenContext> one{t}, two{t, t};
  const double single = calpo::token_cal_loss(calpo::surrogate(t), 0.7);
  EXPECT_NEAR(calpo::seq_cal_loss(one, TargetMode::surrogate), single, 1e-15);
  EXPECT_NEAR(calpo::seq_cal_loss(two, TargetMode::surrogate), single, 1e-15);
  EXPECT_NEAR(calpo::seq_cal_loss(one, TargetMode::one_minus_surrogate),
              calpo::token_cal_loss(1 - calpo::surrogate(t), 0.7), 1e-15);
  EXPECT_THROW(calpo::seq_cal_loss(std::vector<TokenContext>{}, TargetMode::surrogate), calpo::InvalidInput);

  calpo::Rng rng(23);
  std::vector<TokenContext> five;
  double brute = 0.0;
  for (int i = 0; i < 5; ++i) {
    const auto p = calpo::softmax(calpo::detail::random_logits(rng, 4));
    five.push_back({p, rng.uniform_index(4)});
    const double m = p[five.back().truth] - [&] {
      double b = -1;
      for (std::size_t j = 0; j < 4; ++j)
        if (j != five.back().truth) b = std::max(b, p[j]);
      return b;
    }();
    const double z = 1.0 / (1.0 + std::exp(-m));
    const double c = *std::max_element(p.begin(), p.end());
    brute += (z * (1 - c) + (1 - z) * c) / 5.0;
  }
  EXPECT_NEAR(calpo::seq_cal_loss(five, TargetMode::surrogate), brute, 1e-15);
}

TEST(CalLossGradient, Examples) {
  const std::vector<std::vector<double>> logits{{0.0, 0.0}};
  const std::vector<TokenContext> half{{{0.5, 0.5}, 0}};
  const auto g = calpo::cal_loss_gradient(half, TargetMode::surrogate, logits);
  EXPECT_EQ(g[0].d_loss_d_confidence, 0.0);
  for (double v : g[0].d_loss_d_logits) EXPECT_EQ(v, 0.0);

  const std::vector<TokenContext> t{{{0.7, 0.2, 0.1}, 0}};
  const std::vector<std::vector<double>> l3{{std::log(0.7), std::log(0.2), std::log(0.1)}};
  EXPECT_NEAR(calpo::cal_loss_gradient(t, TargetMode::surrogate, l3)[0].d_loss_d_confidence, -0.2449186624, 1e-10);
  EXPECT_THROW(calpo::cal_loss_gradient(t, TargetMode::surrogate, logits), calpo::InvalidInput);
}

TEST(CalLossGradient, MatchesFiniteDifferences) {
  calpo::Rng rng(24);
  for (int i = 0; i < 100; ++i) {
    const std::size_t len = 1 + rng.uniform_index(4);
    std::vector<std::vector<double>> logits;
    std::vector<TokenContext> ctx;
    for (std::size_t t = 0; t < len; ++t) {
      logits.push_back(calpo::detail::random_logits(rng, 4));
      ctx.push_back({calpo::softmax(logits.back()), rng.uniform_index(4)});
    }
    const auto mode = i % 2 ? TargetMode::surrogate : TargetMode::one_minus_surrogate;
    const auto targets = calpo::token_targets(ctx, mode);
    const auto g = calpo::cal_loss_gradient(ctx, mode, logits);
    std::vector<double> flat, analytic;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t j = 0; j < 4; ++j) {
        flat.push_back(logits[t][j]);
        analytic.push_back(g[t].d_loss_d_logits[j] / static_cast<double>(len));
        EXPECT_LE(std::abs(g[t].d_loss_d_logits[j]), 0.25);
      }
      EXPECT_LE(std::abs(g[t].d_loss_d_confidence), 1.0);
    }
    const auto fd = calpo::finite_diff_gradient(
        [&](std::span<const double> x) {
          std::vector<std::vector<double>> l(len, std::vector<double>(4));
          for (std::size_t k = 0; k < x.size(); ++k) l[k / 4][k % 4] = x[k];
          return calpo::seq_cal_loss_frozen(l, targets);
        },
        flat);
    EXPECT_LE(calpo::relative_error(analytic, fd), 1e-6);
  }
}

TEST(BceCalLoss, Examples) {
  EXPECT_NEAR(calpo::bce_cal_loss(0.5, 0.5), std::log(2.0), 1e-15);
  EXPECT_NEAR(calpo::bce_cal_loss(1.0, 1.0 - calpo::kBceEps), 0.0, 1e-11);
  EXPECT_NEAR(calpo::bce_cal_loss(0.8, 0.6), -(0.8 * std::log(0.6) + 0.2 * std::log(0.4)), 1e-15);
  EXPECT_NEAR(calpo::bce_cal_loss(0.8, 0.6), 0.5919186453876, 1e-10);
  EXPECT_TRUE(std::isfinite(calpo::bce_cal_loss(0.3, 0.0)));
  EXPECT_TRUE(std::isfinite(calpo::bce_cal_loss(0.3, 1.0)));
}

TEST(BceCalLoss, GradientMatchesFiniteDifferences) {
  calpo::Rng rng(25);
  for (int i = 0; i < 100; ++i) {
    const auto l = calpo::detail::random_logits(rng, 4);
    const double z = rng.uniform();
    const auto g = calpo::bce_logit_gradient(z, calpo::softmax(l));
    const auto fd = calpo::finite_diff_gradient(
        [&](std::span<const double> x) { return calpo::bce_cal_loss(z, calpo::confidence(calpo::softmax(x))); }, l);
    EXPECT_LE(calpo::relative_error(g, fd), 1e-6);
  }
}

}  // namespace
