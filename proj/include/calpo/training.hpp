#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/policy.hpp"
#include "calpo/preference.hpp"
#include "calpo/rng.hpp"

namespace calpo {

enum class Objective { sft, sft_label_smooth, dpo, dpo_bce, dpo_bpc };

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::sft: return "sft";
    case Objective::sft_label_smooth: return "sft_label_smooth";
    case Objective::dpo: return "dpo";
    case Objective::dpo_bce: return "dpo_bce";
    case Objective::dpo_bpc: return "dpo_bpc";
  }
  return "?";
}

inline Objective objective_from_name(const std::string& s) {
  for (auto o : {Objective::sft, Objective::sft_label_smooth, Objective::dpo, Objective::dpo_bce,
                 Objective::dpo_bpc}) {
    if (s == objective_name(o)) return o;
  }
  throw InvalidInput("unknown objective '" + s + "'");
}

inline bool is_preference(Objective o) {
  return o == Objective::dpo || o == Objective::dpo_bce || o == Objective::dpo_bpc;
}

struct TrainConfig {
  Objective objective = Objective::sft;
  double beta = 0.1;
  double lambda = 0.1;
  double epsilon_smooth = 0.0;
  StepSchedule schedule{};
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

inline void validate_config(const TrainConfig& c) {
  require(c.beta > 0.0 && std::isfinite(c.beta), "beta must be positive");
  require(c.lambda >= 0.0 && std::isfinite(c.lambda), "lambda must be non-negative");
  require(c.epsilon_smooth >= 0.0 && c.epsilon_smooth < 1.0, "epsilon_smooth must lie in [0,1)");
  require(c.schedule.eta0 > 0.0 && std::isfinite(c.schedule.eta0), "step size must be positive");
  require(c.epochs >= 1, "epochs must be positive");
  require(c.batch_size >= 1, "batch_size must be positive");
}

inline CalibrationTerm calibration_term(Objective o) {
  if (o == Objective::dpo_bce) return CalibrationTerm::bce;
  if (o == Objective::dpo_bpc) return CalibrationTerm::l1_surrogate;
  return CalibrationTerm::none;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double selection_score = 0.0;
};

struct TrainResult {
  TabularPolicy policy;  // selected checkpoint
  std::size_t selected_epoch = 0;
  std::vector<EpochRecord> history;
};

/// Lower is better; evaluated on the policy after every epoch.
using CheckpointScore = std::function<double(const TabularPolicy&)>;

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "train/shuffle", epoch);
  rng.shuffle(order);
  return order;
}

inline void check_finite(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw NumericalDivergence("non-finite training loss in epoch " + std::to_string(epoch));
  }
}

template <class Loss, class Grad>
TrainResult run_epochs(TabularPolicy policy, std::size_t n, const TrainConfig& cfg,
                       const CheckpointScore& score, Loss&& loss, Grad&& grad) {
  require(n >= 1, "training set is empty");
  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> g(policy.num_parameters());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::fill(g.begin(), g.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        total += loss(policy, order[b]);
        grad(policy, order[b], std::span<double>(g), scale);
      }
      if (!all_finite(g)) throw NumericalDivergence("non-finite gradient in epoch " + std::to_string(epoch));
      apply_gradient_step(policy, g, ++step, cfg.schedule);
    }
    const double mean_loss = total / static_cast<double>(n);
    check_finite(mean_loss, epoch);
    if (!all_finite(policy.parameters())) {
      throw NumericalDivergence("non-finite parameters after epoch " + std::to_string(epoch));
    }
    const double s = score(policy);
    result.history.push_back(EpochRecord{epoch, mean_loss, s});
    if (s < best) {
      best = s;
      result.policy = policy;
      result.selected_epoch = epoch;
    }
  }
  if (result.selected_epoch == 0) {
    throw NumericalDivergence("checkpoint score was never finite");
  }
  return result;
}

}  // namespace detail

/// Supervised fine-tuning with (optionally smoothed) cross-entropy.
inline TrainResult train_sft(const TabularPolicy& init, const std::vector<LabeledSequence>& data,
                             const TrainConfig& cfg, const CheckpointScore& score) {
  validate_config(cfg);
  require(!is_preference(cfg.objective), "train_sft needs an SFT objective");
  const double eps = cfg.objective == Objective::sft_label_smooth ? cfg.epsilon_smooth : 0.0;
  return detail::run_epochs(
      init, data.size(), cfg, score,
      [&](const TabularPolicy& p, std::size_t i) { return sft_loss(p, data[i].prompt, data[i].tokens, eps); },
      [&](const TabularPolicy& p, std::size_t i, std::span<double> g, double scale) {
        add_sft_gradient(p, data[i].prompt, data[i].tokens, eps, g, scale);
      });
}

/// DPO, optionally with a calibration term, against a frozen reference.
inline TrainResult train_preference(const TabularPolicy& init, const TabularPolicy& reference,
                                    const std::vector<PreferencePair>& pairs, const TrainConfig& cfg,
                                    const CheckpointScore& score) {
  validate_config(cfg);
  require(is_preference(cfg.objective), "train_preference needs a preference objective");
  const CalibrationTerm term = calibration_term(cfg.objective);
  return detail::run_epochs(
      init, pairs.size(), cfg, score,
      [&](const TabularPolicy& p, std::size_t i) {
        return joint_loss(p, reference, pairs[i], cfg.beta, cfg.lambda, term);
      },
      [&](const TabularPolicy& p, std::size_t i, std::span<double> g, double scale) {
        add_joint_gradient(p, reference, pairs[i], cfg.beta, cfg.lambda, g, scale, term);
      });
}

/// Mean per-token NLL (no smoothing) over a labeled set.
inline double mean_nll(const TabularPolicy& policy, const std::vector<LabeledSequence>& data) {
  require(!data.empty(), "mean_nll: empty data");
  double s = 0.0;
  for (const auto& e : data) s += sft_loss(policy, e.prompt, e.tokens, 0.0);
  return s / static_cast<double>(data.size());
}

}  // namespace calpo
