#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "calpo/gradcheck.hpp"
#include "calpo/selection.hpp"

namespace {

using calpo::Candidate;
using calpo::ConfidenceSource;

std::vector<Candidate> make(std::vector<double> conf) {
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < conf.size(); ++i) out.push_back({{static_cast<int>(i)}, conf[i], i});
  return out;
}

TEST(ConfidenceAtK, Examples) {
  EXPECT_EQ(calpo::confidence_at_k(make({0.4, 0.9, 0.7})), 1u);
  EXPECT_EQ(calpo::confidence_at_k(make({0.5, 0.5})), 0u);
  EXPECT_EQ(calpo::confidence_at_k(make({0.3})), 0u);
  EXPECT_THROW(calpo::confidence_at_k(std::vector<Candidate>{}), calpo::InvalidInput);
  EXPECT_THROW(calpo::confidence_at_k(make({1.5, 0.2})), calpo::InvalidInput);
}

TEST(ConfidenceAtK, SelectsMaximum) {
  calpo::Rng rng(61);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> c(1 + rng.uniform_index(8));
    for (double& v : c) v = rng.uniform();
    const auto cands = make(c);
    EXPECT_EQ(cands[calpo::confidence_at_k(cands)].label_confidence, *std::max_element(c.begin(), c.end()));
  }
}

TEST(BayesCheck, Examples) {
  const std::vector<double> p{0.2, 0.9, 0.5};
  const auto b = calpo::bayes_optimality_check(p);
  EXPECT_NEAR(b.confidence_at_k, 0.9, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.fixed_index[i], p[i], 1e-15);
  EXPECT_NEAR(b.random, (0.2 + 0.9 + 0.5) / 3, 1e-15);
  const auto eq = calpo::bayes_optimality_check(std::vector<double>(4, 0.3));
  for (double v : eq.fixed_index) EXPECT_NEAR(v, eq.confidence_at_k, 1e-15);
  EXPECT_NEAR(eq.random, eq.confidence_at_k, 1e-15);
}

TEST(BayesCheck, ConfidenceAtKDominatesAndIsMonotone) {
  calpo::Rng rng(62);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t k = t % 2 ? 4 : 8;
    std::vector<double> p(k);
    for (double& v : p) v = rng.uniform();
    const auto b = calpo::bayes_optimality_check(p);
    for (double f : b.fixed_index) EXPECT_GE(b.confidence_at_k, f);
    EXPECT_GE(b.confidence_at_k, b.random);
    const std::vector<double> sub(p.begin(), p.begin() + 1 + static_cast<long>(rng.uniform_index(k)));
    EXPECT_GE(b.confidence_at_k, calpo::bayes_optimality_check(sub).confidence_at_k - 1e-12);
  }
}

calpo::TaskSpec task(std::size_t prompts) {
  calpo::TaskSpec s;
  s.num_prompts = prompts;
  s.ambiguity = 0.5;
  s.seed = 3;
  return calpo::generate_tasks(s).spec;
}

TEST(EvaluateSelection, DeterministicPolicyIgnoresK) {
  const auto spec = task(5);
  calpo::TabularPolicy p(spec.num_prompts, spec.vocab_size());
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    int prev = calpo::kStartToken;
    for (std::size_t i = 0; i < spec.stub_length; ++i) {
      p.logits({x, prev})[static_cast<std::size_t>(spec.stub_token(i, 0))] = 800.0;
      prev = spec.stub_token(i, 0);
    }
    p.logits({x, prev})[1] = 800.0;
  }
  double exact = 0;
  for (const auto& q : spec.label_distributions) exact += q[1] / spec.num_prompts;
  for (std::size_t k : {1u, 4u, 8u}) {
    const auto r = calpo::evaluate_selection(p, spec, k, 1.0, 400, 7);
    EXPECT_NEAR(calpo::expected_oracle_selection_accuracy(p, spec, k, 1.0), exact, 1e-12);
    EXPECT_NEAR(r.accuracy, exact, 4 * r.stderr_ + 1e-9);
  }
}

TEST(EvaluateSelection, OracleConfidencesMatchExactExpectation) {
  const auto spec = task(8);
  calpo::Rng rng(63);
  const auto p = calpo::detail::random_policy(rng, spec.num_prompts, spec.vocab_size(), 1.0);
  for (std::size_t k : {1u, 4u, 8u}) {
    const auto r = calpo::evaluate_selection(p, spec, k, 1.0, 2000, 11, ConfidenceSource::oracle);
    EXPECT_NEAR(r.accuracy, calpo::expected_oracle_selection_accuracy(p, spec, k, 1.0), 3.5 * r.stderr_);
  }
  EXPECT_GE(calpo::expected_oracle_selection_accuracy(p, spec, 8, 1.0),
            calpo::expected_oracle_selection_accuracy(p, spec, 4, 1.0));
  EXPECT_THROW(calpo::evaluate_selection(p, spec, 0, 1.0, 1, 0), calpo::InvalidInput);
}

TEST(FinalTokenMarginal, SumsToOneAndMatchesSampling) {
  const auto spec = task(2);
  calpo::Rng rng(64);
  const auto p = calpo::detail::random_policy(rng, spec.num_prompts, spec.vocab_size(), 1.5);
  const auto m = calpo::final_token_marginal(p, 1, spec.sequence_length(), 0.7);
  double s = 0;
  for (double v : m) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  std::vector<double> counts(m.size(), 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(calpo::sample_candidate(p, 1, spec.sequence_length(), 0.7, rng).sequence.back())];
  for (std::size_t j = 0; j < m.size(); ++j) EXPECT_NEAR(counts[j] / n, m[j], 4 * std::sqrt(m[j] * (1 - m[j]) / n) + 1e-9);
}

TEST(SelectionCsv, Header) {
  const auto csv = calpo::selection_to_csv({calpo::SelectionResult{4, 1.0, 0, 0.5, 0.01, 10}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,temperature,seed,accuracy,stderr");
}

}  // namespace
