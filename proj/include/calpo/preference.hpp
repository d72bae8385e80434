#pragma once

// DPO and the calibration-augmented joint objective
//
//   r(x, y)  = beta (log pi(y|x) - log pi_ref(y|x))
//   L_dpo    = -log sigmoid(r(x, y+) - r(x, y-))
//   L_total  = L_dpo + lambda (L_cal(y+; z~) + L_cal(y-; 1 - z~))
//
// Token contexts use each sequence's own tokens as the truth index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "calpo/calibration_loss.hpp"
#include "calpo/errors.hpp"
#include "calpo/numerics.hpp"
#include "calpo/policy.hpp"

namespace calpo {

struct PreferencePair {
  std::size_t context_id = 0;
  std::vector<int> preferred;
  std::vector<int> dispreferred;

  bool operator==(const PreferencePair&) const = default;
};

struct PreferenceScore {
  double r_plus = 0.0;
  double r_minus = 0.0;
  double dpo_margin = 0.0;
  double beta = 0.0;
};

/// Which calibration term is added to DPO.
enum class CalibrationTerm { none, l1_surrogate, bce };

inline void validate_pair(const TabularPolicy& policy, const PreferencePair& pair) {
  validate_sequence(policy, pair.preferred);
  validate_sequence(policy, pair.dispreferred);
  require(pair.preferred != pair.dispreferred, "preferred and dispreferred sequences are identical");
  require(pair.context_id < policy.num_prompts(), "unknown context id");
}

inline double seq_logprob(const TabularPolicy& policy, std::size_t context_id, std::span<const int> seq) {
  validate_sequence(policy, seq);
  const auto states = sequence_states(context_id, seq);
  double lp = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    lp += log_softmax(policy.logits(states[t]))[static_cast<std::size_t>(seq[t])];
  }
  return lp;
}

inline std::vector<TokenContext> token_contexts(const TabularPolicy& policy, std::size_t context_id,
                                                std::span<const int> seq) {
  validate_sequence(policy, seq);
  const auto states = sequence_states(context_id, seq);
  std::vector<TokenContext> out;
  out.reserve(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    out.push_back(TokenContext{next_token_dist(policy, states[t]), static_cast<std::size_t>(seq[t])});
  }
  return out;
}

inline PreferenceScore preference_score(const TabularPolicy& policy, const TabularPolicy& reference,
                                        const PreferencePair& pair, double beta) {
  require(beta > 0.0, "beta must be positive");
  validate_pair(policy, pair);
  PreferenceScore s;
  s.beta = beta;
  s.r_plus = beta * (seq_logprob(policy, pair.context_id, pair.preferred) -
                     seq_logprob(reference, pair.context_id, pair.preferred));
  s.r_minus = beta * (seq_logprob(policy, pair.context_id, pair.dispreferred) -
                      seq_logprob(reference, pair.context_id, pair.dispreferred));
  s.dpo_margin = s.r_plus - s.r_minus;
  return s;
}

inline double dpo_loss(const TabularPolicy& policy, const TabularPolicy& reference,
                       const PreferencePair& pair, double beta) {
  return softplus(-preference_score(policy, reference, pair, beta).dpo_margin);
}

namespace detail {

// Adds w * sum_t (e_{y_t} - p_t) into the rows visited by seq: the gradient of
// w * log pi(seq) with respect to the logits.
inline void add_logprob_gradient(const TabularPolicy& policy, std::size_t context_id,
                                 std::span<const int> seq, double w, std::span<double> grad) {
  const auto states = sequence_states(context_id, seq);
  const std::size_t v = policy.vocab_size();
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto p = next_token_dist(policy, states[t]);
    const std::size_t row = policy.state_index(states[t]) * v;
    for (std::size_t j = 0; j < v; ++j) {
      grad[row + j] += w * ((static_cast<int>(j) == seq[t] ? 1.0 : 0.0) - p[j]);
    }
  }
}

inline double cal_term_value(const TabularPolicy& policy, std::size_t context_id,
                             std::span<const int> seq, TargetMode mode, CalibrationTerm term) {
  const auto ctx = token_contexts(policy, context_id, seq);
  if (term == CalibrationTerm::l1_surrogate) return seq_cal_loss(ctx, mode);
  // BCE baseline is summed over the sequence.
  double s = 0.0;
  for (const auto& t : ctx) s += bce_cal_loss(token_target(t, mode), confidence(t.probs));
  return s;
}

inline void add_cal_term_gradient(const TabularPolicy& policy, std::size_t context_id,
                                  std::span<const int> seq, TargetMode mode, CalibrationTerm term,
                                  double w, std::span<double> grad) {
  const auto states = sequence_states(context_id, seq);
  const auto ctx = token_contexts(policy, context_id, seq);
  const std::size_t v = policy.vocab_size();
  const double per_token = term == CalibrationTerm::l1_surrogate
                               ? w / static_cast<double>(seq.size())
                               : w;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const double target = token_target(ctx[t], mode);
    std::vector<double> g;
    if (term == CalibrationTerm::l1_surrogate) {
      g = confidence_logit_gradient(ctx[t].probs);
      for (double& x : g) x *= 1.0 - 2.0 * target;
    } else {
      g = bce_logit_gradient(target, ctx[t].probs);
    }
    const std::size_t row = policy.state_index(states[t]) * v;
    for (std::size_t j = 0; j < v; ++j) grad[row + j] += per_token * g[j];
  }
}

}  // namespace detail

/// Adds scale * d dpo_loss / d logits into grad.
inline void add_dpo_gradient(const TabularPolicy& policy, const TabularPolicy& reference,
                             const PreferencePair& pair, double beta, std::span<double> grad,
                             double scale = 1.0) {
  require(grad.size() == policy.num_parameters(), "gradient shape mismatch");
  const auto s = preference_score(policy, reference, pair, beta);
  // d softplus(-m) / dm = -sigmoid(-m)
  const double dm = -sigmoid(-s.dpo_margin) * beta * scale;
  detail::add_logprob_gradient(policy, pair.context_id, pair.preferred, dm, grad);
  detail::add_logprob_gradient(policy, pair.context_id, pair.dispreferred, -dm, grad);
}

/// Calibration part of the joint objective (without lambda).
inline double pair_cal_loss(const TabularPolicy& policy, const PreferencePair& pair,
                            CalibrationTerm term = CalibrationTerm::l1_surrogate) {
  validate_pair(policy, pair);
  if (term == CalibrationTerm::none) return 0.0;
  return detail::cal_term_value(policy, pair.context_id, pair.preferred, TargetMode::surrogate, term) +
         detail::cal_term_value(policy, pair.context_id, pair.dispreferred,
                                TargetMode::one_minus_surrogate, term);
}

inline double joint_loss(const TabularPolicy& policy, const TabularPolicy& reference,
                         const PreferencePair& pair, double beta, double lambda,
                         CalibrationTerm term = CalibrationTerm::l1_surrogate) {
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be non-negative");
  const double dpo = dpo_loss(policy, reference, pair, beta);
  if (lambda == 0.0 || term == CalibrationTerm::none) return dpo;
  return dpo + lambda * pair_cal_loss(policy, pair, term);
}

/// Adds scale * d joint_loss / d logits into grad, surrogate targets frozen.
inline void add_joint_gradient(const TabularPolicy& policy, const TabularPolicy& reference,
                               const PreferencePair& pair, double beta, double lambda,
                               std::span<double> grad, double scale = 1.0,
                               CalibrationTerm term = CalibrationTerm::l1_surrogate) {
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be non-negative");
  add_dpo_gradient(policy, reference, pair, beta, grad, scale);
  if (lambda == 0.0 || term == CalibrationTerm::none) return;
  const double w = lambda * scale;
  detail::add_cal_term_gradient(policy, pair.context_id, pair.preferred, TargetMode::surrogate, term,
                                w, grad);
  detail::add_cal_term_gradient(policy, pair.context_id, pair.dispreferred,
                                TargetMode::one_minus_surrogate, term, w, grad);
}

/// Joint loss with the surrogate targets held at `frozen`'s values: the
/// function whose finite-difference gradient equals add_joint_gradient.
inline double joint_loss_frozen_targets(const TabularPolicy& policy, const TabularPolicy& frozen,
                                        const TabularPolicy& reference, const PreferencePair& pair,
                                        double beta, double lambda,
                                        CalibrationTerm term = CalibrationTerm::l1_surrogate) {
  const double dpo = dpo_loss(policy, reference, pair, beta);
  if (lambda == 0.0 || term == CalibrationTerm::none) return dpo;
  auto branch = [&](std::span<const int> seq, TargetMode mode) {
    const auto targets = token_targets(token_contexts(frozen, pair.context_id, seq), mode);
    const auto live = token_contexts(policy, pair.context_id, seq);
    double s = 0.0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const double c = confidence(live[t].probs);
      s += term == CalibrationTerm::l1_surrogate ? token_cal_loss(targets[t], c)
                                                 : bce_cal_loss(targets[t], c);
    }
    return term == CalibrationTerm::l1_surrogate ? s / static_cast<double>(seq.size()) : s;
  };
  return dpo + lambda * (branch(pair.preferred, TargetMode::surrogate) +
                         branch(pair.dispreferred, TargetMode::one_minus_surrogate));
}

/// Largest lambda for which calibration gradients cannot flip a DPO margin of
/// at least delta_min: 2 delta_min / |y|.
inline double lambda_bound(double delta_min, std::size_t seq_len) {
  require(delta_min > 0.0 && std::isfinite(delta_min), "delta_min must be positive");
  require(seq_len >= 1, "sequence length must be positive");
  return 2.0 * delta_min / static_cast<double>(seq_len);
}

/// Per-sequence calibration gradient with respect to the sequence
/// log-probability: sum over tokens of d l_t / d logit[y_t] (softmax
/// identities), bounded by |y| / 4.
inline double sequence_cal_logprob_gradient(const TabularPolicy& policy, std::size_t context_id,
                                            std::span<const int> seq, TargetMode mode) {
  const auto ctx = token_contexts(policy, context_id, seq);
  double s = 0.0;
  for (std::size_t t = 0; t < ctx.size(); ++t) {
    const double target = token_target(ctx[t], mode);
    const auto g = confidence_logit_gradient(ctx[t].probs);
    s += (1.0 - 2.0 * target) * g[ctx[t].truth];
  }
  return s;
}

/// lambda |dL/dlog pi(y+) - dL/dlog pi(y-)|, to be compared with 2 lambda G, G = |y| / 4.
inline double cal_margin_perturbation(const TabularPolicy& policy, const PreferencePair& pair,
                                      double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be non-negative");
  validate_pair(policy, pair);
  if (lambda == 0.0) return 0.0;
  const double gp = sequence_cal_logprob_gradient(policy, pair.context_id, pair.preferred,
                                                  TargetMode::surrogate);
  const double gm = sequence_cal_logprob_gradient(policy, pair.context_id, pair.dispreferred,
                                                  TargetMode::one_minus_surrogate);
  return lambda * std::abs(gp - gm);
}

inline double perturbation_bound(const PreferencePair& pair, double lambda) {
  const double len = static_cast<double>(std::max(pair.preferred.size(), pair.dispreferred.size()));
  return 2.0 * lambda * len / 4.0;
}

/// Smallest DPO margin over a set of pairs.
inline double min_dpo_margin(const TabularPolicy& policy, const TabularPolicy& reference,
                             std::span<const PreferencePair> pairs, double beta) {
  require(!pairs.empty(), "min_dpo_margin: no pairs");
  double m = preference_score(policy, reference, pairs[0], beta).dpo_margin;
  for (const auto& p : pairs.subspan(1)) m = std::min(m, preference_score(policy, reference, p, beta).dpo_margin);
  return m;
}

}  // namespace calpo
