#pragma once

// Prompt-conditioned bigram policy. A state is (prompt, previous token) with
// a distinguished START; each state owns a row of V logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/io.hpp"
#include "calpo/numerics.hpp"

namespace calpo {

inline constexpr int kStartToken = -1;

struct State {
  std::size_t prompt = 0;
  int prev = kStartToken;
};

class TabularPolicy {
 public:
  TabularPolicy() = default;
  TabularPolicy(std::size_t num_prompts, std::size_t vocab_size)
      : num_prompts_(num_prompts), vocab_size_(vocab_size),
        logits_(num_prompts * (vocab_size + 1) * vocab_size, 0.0) {
    require(vocab_size >= 2, "policy vocabulary must have at least two tokens");
    require(num_prompts >= 1, "policy needs at least one prompt");
  }

  std::size_t num_prompts() const { return num_prompts_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t states_per_prompt() const { return vocab_size_ + 1; }
  std::size_t num_states() const { return num_prompts_ * states_per_prompt(); }
  std::size_t num_parameters() const { return logits_.size(); }

  std::size_t state_index(State s) const {
    require(s.prompt < num_prompts_, "unknown prompt id " + std::to_string(s.prompt));
    require(s.prev >= kStartToken && s.prev < static_cast<int>(vocab_size_),
            "unknown previous token " + std::to_string(s.prev));
    return s.prompt * states_per_prompt() + static_cast<std::size_t>(s.prev + 1);
  }

  State state_at(std::size_t index) const {
    return State{index / states_per_prompt(),
                 static_cast<int>(index % states_per_prompt()) - 1};
  }

  std::span<const double> logits(State s) const {
    return {logits_.data() + state_index(s) * vocab_size_, vocab_size_};
  }
  std::span<double> logits(State s) {
    return {logits_.data() + state_index(s) * vocab_size_, vocab_size_};
  }

  std::span<const double> parameters() const { return logits_; }
  std::span<double> parameters() { return logits_; }

  /// Copy with every logit divided by tau.
  TabularPolicy scaled(double tau) const {
    require(tau > 0.0 && std::isfinite(tau), "temperature must be positive");
    TabularPolicy out = *this;
    for (double& v : out.logits_) v /= tau;
    return out;
  }

  bool operator==(const TabularPolicy&) const = default;

 private:
  std::size_t num_prompts_ = 0;
  std::size_t vocab_size_ = 0;
  std::vector<double> logits_;
};

inline std::vector<double> next_token_dist(const TabularPolicy& policy, State s) {
  return softmax(policy.logits(s));
}

inline void validate_sequence(const TabularPolicy& policy, std::span<const int> seq) {
  require(!seq.empty(), "empty token sequence");
  for (int t : seq) {
    require(t >= 0 && t < static_cast<int>(policy.vocab_size()), "token outside vocabulary");
  }
}

/// States visited while teacher-forcing `seq` under prompt `prompt`.
inline std::vector<State> sequence_states(std::size_t prompt, std::span<const int> seq) {
  std::vector<State> states;
  states.reserve(seq.size());
  int prev = kStartToken;
  for (int tok : seq) {
    states.push_back(State{prompt, prev});
    prev = tok;
  }
  return states;
}

/// (1 - eps) one_hot(truth) + eps / K.
inline std::vector<double> smoothed_target(std::size_t truth, std::size_t num_classes, double eps) {
  require(eps >= 0.0 && eps < 1.0, "label smoothing epsilon must lie in [0,1)");
  require(truth < num_classes, "smoothed_target: truth outside range");
  std::vector<double> y(num_classes, eps / static_cast<double>(num_classes));
  y[truth] += 1.0 - eps;
  return y;
}

/// Mean per-token cross-entropy against the smoothed target (K = vocabulary size).
inline double sft_loss(const TabularPolicy& policy, std::size_t prompt, std::span<const int> seq,
                       double epsilon_smooth) {
  validate_sequence(policy, seq);
  const auto states = sequence_states(prompt, seq);
  double total = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto logp = log_softmax(policy.logits(states[t]));
    const auto y = smoothed_target(static_cast<std::size_t>(seq[t]), policy.vocab_size(), epsilon_smooth);
    for (std::size_t j = 0; j < y.size(); ++j) total -= y[j] * logp[j];
  }
  return total / static_cast<double>(seq.size());
}

/// Adds scale * d sft_loss / d logits into `grad` (same layout as parameters()).
inline void add_sft_gradient(const TabularPolicy& policy, std::size_t prompt, std::span<const int> seq,
                             double epsilon_smooth, std::span<double> grad, double scale = 1.0) {
  validate_sequence(policy, seq);
  require(grad.size() == policy.num_parameters(), "gradient shape mismatch");
  const auto states = sequence_states(prompt, seq);
  const double w = scale / static_cast<double>(seq.size());
  const std::size_t v = policy.vocab_size();
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto p = next_token_dist(policy, states[t]);
    const auto y = smoothed_target(static_cast<std::size_t>(seq[t]), v, epsilon_smooth);
    const std::size_t row = policy.state_index(states[t]) * v;
    for (std::size_t j = 0; j < v; ++j) grad[row + j] += w * (p[j] - y[j]);
  }
}

// ---------------------------------------------------------------------------
// Optimizer

enum class ScheduleKind { constant, diminishing };

struct StepSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double eta0 = 0.1;

  /// Step size for the k-th update (k >= 1): eta0 or eta0 / sqrt(k).
  double eta(std::size_t k) const {
    require(k >= 1, "step index starts at 1");
    require(eta0 > 0.0, "step size must be positive");
    return kind == ScheduleKind::constant ? eta0 : eta0 / std::sqrt(static_cast<double>(k));
  }
};

inline void apply_gradient_step(TabularPolicy& policy, std::span<const double> gradient,
                                std::size_t k, const StepSchedule& schedule) {
  require(gradient.size() == policy.num_parameters(), "gradient shape mismatch");
  const double eta = schedule.eta(k);
  auto params = policy.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= eta * gradient[i];
}

// ---------------------------------------------------------------------------
// Temperature scaling

struct LabeledSequence {
  std::size_t prompt = 0;
  std::vector<int> tokens;
};

/// Mean NLL of the final (label) token of each sequence under logits / tau.
inline double label_nll(const TabularPolicy& policy, std::span<const LabeledSequence> data, double tau) {
  require(!data.empty(), "label_nll: empty validation set");
  double total = 0.0;
  std::vector<double> row(policy.vocab_size());
  for (const auto& ex : data) {
    validate_sequence(policy, ex.tokens);
    const State s{ex.prompt, ex.tokens.size() >= 2 ? ex.tokens[ex.tokens.size() - 2] : kStartToken};
    const auto l = policy.logits(s);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = l[j] / tau;
    total -= log_softmax(row)[static_cast<std::size_t>(ex.tokens.back())];
  }
  return total / static_cast<double>(data.size());
}

/// Log-spaced grid of 25 temperatures over [0.25, 8].
inline std::vector<double> default_tau_grid() {
  std::vector<double> g;
  const double lo = std::log(0.25), hi = std::log(8.0);
  for (int i = 0; i < 25; ++i) g.push_back(std::exp(lo + (hi - lo) * i / 24.0));
  return g;
}

/// Grid temperature minimizing validation NLL; ties go to the tau nearest 1.
inline double temperature_scale(const TabularPolicy& policy, std::span<const LabeledSequence> validation,
                                std::span<const double> tau_grid) {
  require(!tau_grid.empty(), "temperature grid is empty");
  double best_tau = 0.0;
  double best_nll = std::numeric_limits<double>::infinity();
  for (double tau : tau_grid) {
    require(tau > 0.0 && std::isfinite(tau), "temperatures must be positive");
    const double nll = label_nll(policy, validation, tau);
    const bool better = nll < best_nll ||
                        (nll == best_nll && std::abs(std::log(tau)) < std::abs(std::log(best_tau)));
    if (better) {
      best_nll = nll;
      best_tau = tau;
    }
  }
  return best_tau;
}

// ---------------------------------------------------------------------------
// Checkpoints: prompt_id,prev_token,logit_0,...,logit_{V-1}; prev_token -1 is START.

inline std::string checkpoint_to_csv(const TabularPolicy& policy) {
  std::ostringstream out;
  out << "prompt_id,prev_token";
  for (std::size_t j = 0; j < policy.vocab_size(); ++j) out << ",logit_" << j;
  out << '\n';
  for (std::size_t s = 0; s < policy.num_states(); ++s) {
    const State st = policy.state_at(s);
    out << st.prompt << ',' << st.prev;
    for (double v : policy.logits(st)) out << ',' << io::fmt_double(v);
    out << '\n';
  }
  return out.str();
}

inline TabularPolicy checkpoint_from_csv(std::string_view text) {
  const auto lines = io::read_lines(text);
  require(!lines.empty(), "checkpoint: empty input");
  const auto header = io::split_csv_line(lines[0]);
  require(header.size() >= 4 && header[0] == "prompt_id" && header[1] == "prev_token",
          "checkpoint: bad header");
  const std::size_t v = header.size() - 2;
  std::size_t max_prompt = 0;
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = io::split_csv_line(lines[i]);
    require(f.size() == v + 2, "checkpoint: wrong field count on line " + std::to_string(i + 1));
    max_prompt = std::max(max_prompt, static_cast<std::size_t>(io::parse_int(f[0], "prompt_id")));
    rows.push_back(std::move(f));
  }
  TabularPolicy policy(max_prompt + 1, v);
  require(rows.size() == policy.num_states(), "checkpoint: missing states");
  for (const auto& f : rows) {
    const State s{static_cast<std::size_t>(io::parse_int(f[0], "prompt_id")),
                  static_cast<int>(io::parse_int(f[1], "prev_token"))};
    auto l = policy.logits(s);
    for (std::size_t j = 0; j < v; ++j) l[j] = io::parse_double(f[j + 2], "logit");
  }
  return policy;
}

}  // namespace calpo
