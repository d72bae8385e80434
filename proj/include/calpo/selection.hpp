#pragma once

// Confidence@k: among k sampled responses keep the one whose final label
// token is most probable.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/io.hpp"
#include "calpo/policy.hpp"
#include "calpo/rng.hpp"
#include "calpo/synthdata.hpp"

namespace calpo {

struct Candidate {
  std::vector<int> sequence;
  double label_confidence = 0.0;
  std::size_t index = 0;
};

/// Position of the most confident candidate, lowest index on ties.
inline std::size_t confidence_at_k(std::span<const Candidate> candidates) {
  require(!candidates.empty(), "confidence_at_k: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    require(candidates[i].label_confidence >= 0.0 && candidates[i].label_confidence <= 1.0,
            "candidate confidence outside [0,1]");
    if (candidates[i].label_confidence > candidates[best].label_confidence) best = i;
  }
  return best;
}

/// Samples a response from logits / tau; label_confidence is the sampling
/// probability of the final token.
inline Candidate sample_candidate(const TabularPolicy& policy, std::size_t prompt, std::size_t length,
                                  double tau, Rng& rng) {
  require(tau > 0.0, "temperature must be positive");
  Candidate c;
  int prev = kStartToken;
  std::vector<double> row(policy.vocab_size());
  for (std::size_t t = 0; t < length; ++t) {
    const auto l = policy.logits(State{prompt, prev});
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = l[j] / tau;
    const auto p = softmax(row);
    const auto tok = rng.categorical(p);
    c.sequence.push_back(static_cast<int>(tok));
    if (t + 1 == length) c.label_confidence = p[tok];
    prev = static_cast<int>(tok);
  }
  return c;
}

enum class ConfidenceSource { policy, oracle, random };

struct SelectionResult {
  std::size_t k = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double stderr_ = 0.0;
  std::size_t samples = 0;
};

/// Mean correctness of the selected response against fresh label draws from
/// q_x, over num_trials passes through every prompt.
inline SelectionResult evaluate_selection(const TabularPolicy& policy, const TaskSpec& spec, std::size_t k,
                                          double temperature, std::size_t num_trials, std::uint64_t seed,
                                          ConfidenceSource source = ConfidenceSource::policy) {
  require(k >= 1, "k must be at least 1");
  require(num_trials >= 1, "num_trials must be positive");
  require(spec.label_distributions.size() == spec.num_prompts, "task spec has no label distributions");
  SelectionResult r;
  r.k = k;
  r.temperature = temperature;
  r.seed = seed;
  double sum = 0.0, sum_sq = 0.0;
  std::vector<Candidate> cands(k);
  for (std::size_t trial = 0; trial < num_trials; ++trial) {
    for (std::size_t x = 0; x < spec.num_prompts; ++x) {
      Rng rng = Rng::derive(seed, "selection", trial * spec.num_prompts + x);
      const auto& q = spec.label_distributions[x];
      for (std::size_t i = 0; i < k; ++i) {
        cands[i] = sample_candidate(policy, x, spec.sequence_length(), temperature, rng);
        cands[i].index = i;
        if (source == ConfidenceSource::oracle) {
          const int label = cands[i].sequence.back();
          cands[i].label_confidence = spec.is_label(label) ? q[static_cast<std::size_t>(label)] : 0.0;
        }
      }
      const std::size_t pick = source == ConfidenceSource::random ? rng.uniform_index(k)
                                                                  : confidence_at_k(cands);
      const int label = cands[pick].sequence.back();
      const int truth = static_cast<int>(rng.categorical(q));
      const double correct = label == truth ? 1.0 : 0.0;
      sum += correct;
      sum_sq += correct * correct;
      ++r.samples;
    }
  }
  const double n = static_cast<double>(r.samples);
  r.accuracy = sum / n;
  const double var = std::max(0.0, sum_sq / n - r.accuracy * r.accuracy);
  r.stderr_ = std::sqrt(var / n);
  return r;
}

/// Distribution of the final token when sampling a response from logits / tau.
inline std::vector<double> final_token_marginal(const TabularPolicy& policy, std::size_t prompt,
                                                std::size_t length, double tau) {
  const std::size_t v = policy.vocab_size();
  std::vector<double> row(v);
  auto step = [&](int prev) {
    const auto l = policy.logits(State{prompt, prev});
    for (std::size_t j = 0; j < v; ++j) row[j] = l[j] / tau;
    return softmax(row);
  };
  std::vector<double> dist = step(kStartToken);
  for (std::size_t t = 1; t < length; ++t) {
    std::vector<double> next(v, 0.0);
    for (std::size_t a = 0; a < v; ++a) {
      if (dist[a] == 0.0) continue;
      const auto p = step(static_cast<int>(a));
      for (std::size_t b = 0; b < v; ++b) next[b] += dist[a] * p[b];
    }
    dist = std::move(next);
  }
  return dist;
}

/// Exact expected accuracy of Confidence@k with oracle confidences:
/// mean over prompts of E[max_i q_x(label_i)] for k i.i.d. sampled labels.
inline double expected_oracle_selection_accuracy(const TabularPolicy& policy, const TaskSpec& spec,
                                                 std::size_t k, double tau) {
  double total = 0.0;
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    const auto r = final_token_marginal(policy, x, spec.sequence_length(), tau);
    std::map<double, double> mass;  // candidate value -> probability
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double v = spec.is_label(static_cast<int>(j)) ? spec.label_distributions[x][j] : 0.0;
      mass[v] += r[j];
    }
    double below = 0.0, e = 0.0;
    for (const auto& [v, p] : mass) {
      const double above = std::min(1.0, below + p);
      e += v * (std::pow(above, static_cast<double>(k)) - std::pow(below, static_cast<double>(k)));
      below = above;
    }
    total += e;
  }
  return total / static_cast<double>(spec.num_prompts);
}

struct BayesComparison {
  double confidence_at_k = 0.0;
  std::vector<double> fixed_index;
  double random = 0.0;
};

/// Expected correctness of each selection rule, by enumerating all 2^k joint
/// correctness outcomes of independent candidates with probabilities p.
inline BayesComparison bayes_optimality_check(std::span<const double> p) {
  require(!p.empty() && p.size() <= 20, "bayes_optimality_check: need 1..20 candidates");
  const std::size_t k = p.size();
  std::vector<Candidate> cands(k);
  for (std::size_t i = 0; i < k; ++i) {
    require(p[i] >= 0.0 && p[i] <= 1.0, "probabilities must lie in [0,1]");
    cands[i].label_confidence = p[i];
    cands[i].index = i;
  }
  const std::size_t pick = confidence_at_k(cands);
  BayesComparison out;
  out.fixed_index.assign(k, 0.0);
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << k); ++mask) {
    double prob = 1.0;
    for (std::size_t i = 0; i < k; ++i) prob *= (mask >> i) & 1U ? p[i] : 1.0 - p[i];
    if (prob == 0.0) continue;
    double any = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double zi = (mask >> i) & 1U ? 1.0 : 0.0;
      out.fixed_index[i] += prob * zi;
      any += zi;
    }
    out.confidence_at_k += prob * ((mask >> pick) & 1U ? 1.0 : 0.0);
    out.random += prob * any / static_cast<double>(k);
  }
  return out;
}

inline constexpr const char* kSelectionHeader = "k,temperature,seed,accuracy,stderr";

inline std::string selection_to_csv(const std::vector<SelectionResult>& rows) {
  std::ostringstream out;
  out << kSelectionHeader << '\n';
  for (const auto& r : rows) {
    out << r.k << ',' << io::fmt_double(r.temperature) << ',' << r.seed << ',' << io::fmt_double(r.accuracy)
        << ',' << io::fmt_double(r.stderr_) << '\n';
  }
  return out.str();
}

}  // namespace calpo
