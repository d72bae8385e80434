#pragma once

// Randomized checks of every identity, bound and analytic gradient. Each check
// reports the worst value it saw and, on failure, the first violating sample.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "calpo/calibration_loss.hpp"
#include "calpo/io.hpp"
#include "calpo/metrics.hpp"
#include "calpo/numerics.hpp"
#include "calpo/policy.hpp"
#include "calpo/preference.hpp"
#include "calpo/rng.hpp"

namespace calpo {

struct InvariantResult {
  std::string name;
  std::size_t samples = 0;
  std::size_t violations = 0;
  double max_observed = 0.0;
  double bound = 0.0;
  std::string counterexample;

  bool passed() const { return violations == 0; }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t identity_samples = 100000;
  std::size_t dataset_samples = 1000;
  std::size_t pair_samples = 10000;
  std::size_t gradient_samples = 100;
  double gradient_tolerance = 1e-6;
  // Test hook: scales the analytic calibration gradient to force a failure.
  double corrupt_cal_gradient = 1.0;
};

struct GradcheckReport {
  std::vector<InvariantResult> results;

  bool passed() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed(); });
  }
  const InvariantResult& at(const std::string& name) const {
    for (const auto& r : results) {
      if (r.name == name) return r;
    }
    throw InvalidInput("no invariant named " + name);
  }
};

namespace detail {

inline std::string vec_text(std::span<const double> v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + io::fmt_double(v[i]);
  return s + "]";
}

class Tracker {
 public:
  Tracker(std::string name, double bound) {
    r_.name = std::move(name);
    r_.bound = bound;
  }

  // Records one observation; `why` is evaluated only for the first violation.
  template <class Describe>
  void observe(double value, bool ok, Describe&& why) {
    ++r_.samples;
    r_.max_observed = std::max(r_.max_observed, value);
    if (!ok) {
      if (r_.violations == 0) r_.counterexample = why();
      ++r_.violations;
    }
  }
  void observe(double value) {
    observe(value, value <= r_.bound, [&] { return "value " + io::fmt_double(value); });
  }
  InvariantResult done() { return std::move(r_); }

 private:
  InvariantResult r_;
};

inline std::vector<double> random_logits(Rng& rng, std::size_t v, double spread = 3.0) {
  std::vector<double> l(v);
  for (double& x : l) x = rng.uniform(-spread, spread);
  return l;
}

inline TabularPolicy random_policy(Rng& rng, std::size_t prompts, std::size_t vocab, double spread = 2.0) {
  TabularPolicy p(prompts, vocab);
  for (double& x : p.parameters()) x = rng.uniform(-spread, spread);
  return p;
}

inline std::vector<int> random_sequence(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> s(len);
  for (int& t : s) t = static_cast<int>(rng.uniform_index(vocab));
  return s;
}

inline PreferencePair random_pair(Rng& rng, std::size_t prompts, std::size_t vocab, std::size_t len) {
  PreferencePair p;
  p.context_id = rng.uniform_index(prompts);
  p.preferred = random_sequence(rng, len, vocab);
  do {
    p.dispreferred = random_sequence(rng, len, vocab);
  } while (p.dispreferred == p.preferred);
  return p;
}

// Finite-difference comparison over the full parameter vector of a policy.
template <class Loss>
double policy_fd_error(const TabularPolicy& policy, std::span<const double> analytic, Loss&& loss) {
  TabularPolicy work = policy;
  const auto fd = finite_diff_gradient(
      [&](std::span<const double> x) {
        std::copy(x.begin(), x.end(), work.parameters().begin());
        return loss(work);
      },
      policy.parameters());
  return relative_error(analytic, fd);
}

}  // namespace detail

/// L(c, z) + L(c, 1 - z) = 1.
inline InvariantResult check_cal_symmetry(const GradcheckOptions& o) {
  detail::Tracker t("cal_loss_symmetry", 1e-15);
  Rng rng = Rng::derive(o.seed, "gradcheck/symmetry");
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const double z = rng.uniform(), c = rng.uniform();
    const double dev = std::abs(token_cal_loss(z, c) + token_cal_loss(1.0 - z, c) - 1.0);
    t.observe(dev, dev <= 1e-15, [&] { return "z=" + io::fmt_double(z) + " c=" + io::fmt_double(c); });
  }
  return t.done();
}

/// E|c - Z| over Z in {0,1} equals z(1 - c) + (1 - z)c, and |z - c| + 2 min{z(1-c), c(1-z)}.
inline InvariantResult check_l1_decomposition(const GradcheckOptions& o) {
  detail::Tracker t("l1_decomposition", 1e-12);
  Rng rng = Rng::derive(o.seed, "gradcheck/decomposition");
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const double z = rng.uniform(), c = rng.uniform();
    const double brute = z * std::abs(c - 1.0) + (1.0 - z) * std::abs(c - 0.0);
    const double affine = token_cal_loss(z, c);
    const double split = std::abs(z - c) + 2.0 * std::min(z * (1.0 - c), c * (1.0 - z));
    const double dev = std::max(std::abs(brute - affine), std::abs(brute - split));
    t.observe(dev, dev <= 1e-12, [&] { return "z=" + io::fmt_double(z) + " c=" + io::fmt_double(c); });
  }
  return t.done();
}

/// l1_risk = exact_conditional_ece + noise term on grouped Bernoulli datasets
/// whose oracle_z is the empirical group mean.
inline InvariantResult check_ece_l1_identity(const GradcheckOptions& o) {
  detail::Tracker t("ece_l1_identity", 1e-12);
  for (std::size_t d = 0; d < o.dataset_samples; ++d) {
    Rng rng = Rng::derive(o.seed, "gradcheck/identity", d);
    const std::size_t groups = 1 + rng.uniform_index(20);
    std::vector<PredictionRecord> recs;
    for (std::size_t g = 0; g < groups; ++g) {
      const double z = rng.uniform(), c = rng.uniform();
      const std::size_t n = 1 + rng.uniform_index(25);
      const std::size_t first = recs.size();
      double hits = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        PredictionRecord r;
        r.confidence = c;
        r.correct = rng.bernoulli(z) ? 1 : 0;
        r.group_key = std::to_string(g);
        hits += r.correct;
        recs.push_back(r);
      }
      for (std::size_t i = first; i < recs.size(); ++i) recs[i].oracle_z = hits / static_cast<double>(n);
    }
    const double dev =
        std::abs(l1_risk(recs) - exact_conditional_ece(recs) - decomposition_noise_term(recs));
    t.observe(dev, dev <= 1e-12, [&] { return records_to_csv(recs); });
  }
  return t.done();
}

/// |dl/dc| = |1 - 2 z~| <= 1.
inline InvariantResult check_gradient_stability(const GradcheckOptions& o) {
  detail::Tracker t("dloss_dconfidence_bound", 1.0);
  Rng rng = Rng::derive(o.seed, "gradcheck/stability");
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const std::size_t v = 2 + rng.uniform_index(7);
    TokenContext ctx{softmax(detail::random_logits(rng, v)), rng.uniform_index(v)};
    const double g = std::abs(1.0 - 2.0 * surrogate(ctx));
    t.observe(g);
  }
  return t.done();
}

/// Every logit-gradient entry is at most c(1 - c) <= 1/4.
inline InvariantResult check_logit_gradient_bound(const GradcheckOptions& o) {
  detail::Tracker t("dloss_dlogit_bound", 0.25);
  Rng rng = Rng::derive(o.seed, "gradcheck/logit-bound");
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const std::size_t v = 2 + rng.uniform_index(7);
    auto logits = detail::random_logits(rng, v, 1.0 + rng.uniform(0.0, 6.0));
    TokenContext ctx{softmax(logits), rng.uniform_index(v)};
    const auto mode = rng.bernoulli(0.5) ? TargetMode::surrogate : TargetMode::one_minus_surrogate;
    const auto g = cal_loss_gradient(std::span<const TokenContext>(&ctx, 1), mode,
                                     std::span<const std::vector<double>>(&logits, 1));
    const double c = confidence(ctx.probs);
    double worst = 0.0;
    for (double x : g[0].d_loss_d_logits) worst = std::max(worst, std::abs(x));
    const bool ok = worst <= c * (1.0 - c) + 1e-15 && worst <= 0.25;
    t.observe(worst, ok, [&] { return "logits=" + detail::vec_text(logits) + " truth=" + std::to_string(ctx.truth); });
  }
  return t.done();
}

/// sigma'(u) = sigma(u)(1 - sigma(u)) <= 1/4.
inline InvariantResult check_sigmoid_derivative(const GradcheckOptions& o) {
  detail::Tracker t("sigmoid_derivative_bound", 0.25);
  Rng rng = Rng::derive(o.seed, "gradcheck/sigmoid");
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const double u = rng.uniform(-50.0, 50.0);
    const double s = sigmoid(u);
    t.observe(s * (1.0 - s));
  }
  return t.done();
}

/// Surrogate above 1/2 exactly when the margin is positive, and monotone in the margin.
inline InvariantResult check_surrogate_direction(const GradcheckOptions& o) {
  detail::Tracker t("surrogate_direction_and_order", 0.0);
  Rng rng = Rng::derive(o.seed, "gradcheck/direction");
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < o.identity_samples; ++i) {
    const std::size_t v = 2 + rng.uniform_index(5);
    auto probs = softmax(detail::random_logits(rng, v));
    if (i % 1000 == 0) probs.assign(v, 1.0 / static_cast<double>(v));
    const TokenContext ctx{probs, rng.uniform_index(v)};
    const double m = margin(ctx), s = surrogate(ctx);
    const bool ok = (m > 0.0) == (s > 0.5) && (m < 0.0) == (s < 0.5) && (m != 0.0 || s == 0.5);
    t.observe(ok ? 0.0 : 1.0, ok, [&] { return "probs=" + detail::vec_text(probs); });
    pts.emplace_back(m, s);
  }
  std::sort(pts.begin(), pts.end());
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const bool ok = pts[i].second >= pts[i - 1].second;
    t.observe(ok ? 0.0 : 1.0, ok, [&] { return "margin " + io::fmt_double(pts[i].first); });
  }
  return t.done();
}

/// lambda |dL/dlog pi(y+) - dL/dlog pi(y-)| <= 2 lambda |y| / 4.
inline InvariantResult check_perturbation_bound(const GradcheckOptions& o) {
  detail::Tracker t("cal_margin_perturbation_bound", 0.0);
  double worst_ratio = 0.0;
  for (std::size_t i = 0; i < o.pair_samples; ++i) {
    Rng rng = Rng::derive(o.seed, "gradcheck/perturbation", i);
    const std::size_t v = 2 + rng.uniform_index(5);
    const std::size_t len = 1 + rng.uniform_index(6);
    const auto policy = detail::random_policy(rng, 2, v, 1.0 + rng.uniform(0.0, 4.0));
    const auto pair = detail::random_pair(rng, 2, v, len);
    const double lambda = rng.uniform(0.0, 1.0);
    const double got = cal_margin_perturbation(policy, pair, lambda);
    const double bound = perturbation_bound(pair, lambda);
    if (bound > 0.0) worst_ratio = std::max(worst_ratio, got / bound);
    t.observe(got, got <= bound + 1e-15, [&] {
      return "lambda=" + io::fmt_double(lambda) + " len=" + std::to_string(len) + " value=" + io::fmt_double(got);
    });
  }
  auto r = t.done();
  r.max_observed = worst_ratio;  // reported as a fraction of the bound
  r.bound = 1.0;
  return r;
}

/// Analytic seq_cal_loss gradient vs finite differences with targets frozen.
inline InvariantResult check_seq_cal_gradient(const GradcheckOptions& o) {
  detail::Tracker t("grad_seq_cal_loss", o.gradient_tolerance);
  for (std::size_t i = 0; i < o.gradient_samples; ++i) {
    Rng rng = Rng::derive(o.seed, "gradcheck/seq-cal", i);
    const std::size_t v = 4, len = 1 + rng.uniform_index(5);
    std::vector<std::vector<double>> logits;
    std::vector<TokenContext> ctx;
    for (std::size_t s = 0; s < len; ++s) {
      logits.push_back(detail::random_logits(rng, v));
      ctx.push_back(TokenContext{softmax(logits.back()), rng.uniform_index(v)});
    }
    const auto mode = rng.bernoulli(0.5) ? TargetMode::surrogate : TargetMode::one_minus_surrogate;
    const auto targets = token_targets(ctx, mode);
    const auto grads = cal_loss_gradient(ctx, mode, logits);
    std::vector<double> flat, analytic;
    for (std::size_t s = 0; s < len; ++s) {
      flat.insert(flat.end(), logits[s].begin(), logits[s].end());
      for (double g : grads[s].d_loss_d_logits) {
        analytic.push_back(o.corrupt_cal_gradient * g / static_cast<double>(len));
      }
    }
    const auto fd = finite_diff_gradient(
        [&](std::span<const double> x) {
          std::vector<std::vector<double>> l(len);
          for (std::size_t s = 0; s < len; ++s) l[s].assign(x.begin() + s * v, x.begin() + (s + 1) * v);
          return seq_cal_loss_frozen(l, targets);
        },
        flat);
    const double err = relative_error(analytic, fd);
    t.observe(err, err <= o.gradient_tolerance, [&] {
      return "logits=" + detail::vec_text(flat) + " targets=" + detail::vec_text(targets) +
             " analytic=" + detail::vec_text(analytic) + " fd=" + detail::vec_text(fd);
    });
  }
  return t.done();
}

/// d bce / d logits vs finite differences.
inline InvariantResult check_bce_gradient(const GradcheckOptions& o) {
  detail::Tracker t("grad_bce_cal_loss", o.gradient_tolerance);
  for (std::size_t i = 0; i < o.gradient_samples; ++i) {
    Rng rng = Rng::derive(o.seed, "gradcheck/bce", i);
    const auto logits = detail::random_logits(rng, 2 + rng.uniform_index(5));
    const double z = rng.uniform();
    const auto analytic = bce_logit_gradient(z, softmax(logits));
    const auto fd = finite_diff_gradient(
        [&](std::span<const double> x) { return bce_cal_loss(z, confidence(softmax(x))); }, logits);
    const double err = relative_error(analytic, fd);
    t.observe(err, err <= o.gradient_tolerance,
              [&] { return "logits=" + detail::vec_text(logits) + " z=" + io::fmt_double(z); });
  }
  return t.done();
}

inline InvariantResult check_dpo_gradient(const GradcheckOptions& o) {
  detail::Tracker t("grad_dpo_loss", o.gradient_tolerance);
  for (std::size_t i = 0; i < o.gradient_samples; ++i) {
    Rng rng = Rng::derive(o.seed, "gradcheck/dpo", i);
    const std::size_t v = 3 + rng.uniform_index(3), len = 1 + rng.uniform_index(4);
    const auto policy = detail::random_policy(rng, 2, v);
    const auto ref = detail::random_policy(rng, 2, v);
    const auto pair = detail::random_pair(rng, 2, v, len);
    const double beta = rng.uniform(0.05, 2.0);
    std::vector<double> g(policy.num_parameters(), 0.0);
    add_dpo_gradient(policy, ref, pair, beta, g);
    const double err = detail::policy_fd_error(policy, g, [&](const TabularPolicy& p) {
      return dpo_loss(p, ref, pair, beta);
    });
    t.observe(err, err <= o.gradient_tolerance, [&] { return "instance " + std::to_string(i); });
  }
  return t.done();
}

inline InvariantResult check_joint_gradient(const GradcheckOptions& o, CalibrationTerm term) {
  detail::Tracker t(term == CalibrationTerm::bce ? "grad_joint_loss_bce" : "grad_joint_loss",
                    o.gradient_tolerance);
  for (std::size_t i = 0; i < o.gradient_samples; ++i) {
    Rng rng = Rng::derive(o.seed, term == CalibrationTerm::bce ? "gradcheck/joint-bce" : "gradcheck/joint", i);
    const std::size_t v = 3 + rng.uniform_index(3), len = 1 + rng.uniform_index(4);
    const auto policy = detail::random_policy(rng, 2, v);
    const auto ref = detail::random_policy(rng, 2, v);
    const auto pair = detail::random_pair(rng, 2, v, len);
    const double beta = rng.uniform(0.05, 2.0), lambda = rng.uniform(0.0, 2.0);
    std::vector<double> g(policy.num_parameters(), 0.0);
    add_joint_gradient(policy, ref, pair, beta, lambda, g, 1.0, term);
    const double err = detail::policy_fd_error(policy, g, [&](const TabularPolicy& p) {
      return joint_loss_frozen_targets(p, policy, ref, pair, beta, lambda, term);
    });
    t.observe(err, err <= o.gradient_tolerance, [&] { return "instance " + std::to_string(i); });
  }
  return t.done();
}

inline InvariantResult check_sft_gradient(const GradcheckOptions& o) {
  detail::Tracker t("grad_sft_loss", o.gradient_tolerance);
  for (std::size_t i = 0; i < o.gradient_samples; ++i) {
    Rng rng = Rng::derive(o.seed, "gradcheck/sft", i);
    const std::size_t v = 3 + rng.uniform_index(3), len = 1 + rng.uniform_index(4);
    const auto policy = detail::random_policy(rng, 2, v);
    const std::size_t prompt = rng.uniform_index(2);
    const auto seq = detail::random_sequence(rng, len, v);
    const double eps = rng.bernoulli(0.5) ? 0.0 : rng.uniform(0.0, 0.5);
    std::vector<double> g(policy.num_parameters(), 0.0);
    add_sft_gradient(policy, prompt, seq, eps, g);
    const double err = detail::policy_fd_error(policy, g, [&](const TabularPolicy& p) {
      return sft_loss(p, prompt, seq, eps);
    });
    t.observe(err, err <= o.gradient_tolerance, [&] { return "instance " + std::to_string(i); });
  }
  return t.done();
}

inline GradcheckReport run_gradcheck_suite(const GradcheckOptions& o = {}) {
  GradcheckReport rep;
  rep.results.push_back(check_cal_symmetry(o));
  rep.results.push_back(check_l1_decomposition(o));
  rep.results.push_back(check_ece_l1_identity(o));
  rep.results.push_back(check_gradient_stability(o));
  rep.results.push_back(check_logit_gradient_bound(o));
  rep.results.push_back(check_sigmoid_derivative(o));
  rep.results.push_back(check_surrogate_direction(o));
  rep.results.push_back(check_perturbation_bound(o));
  rep.results.push_back(check_seq_cal_gradient(o));
  rep.results.push_back(check_bce_gradient(o));
  rep.results.push_back(check_dpo_gradient(o));
  rep.results.push_back(check_joint_gradient(o, CalibrationTerm::l1_surrogate));
  rep.results.push_back(check_joint_gradient(o, CalibrationTerm::bce));
  rep.results.push_back(check_sft_gradient(o));
  return rep;
}

namespace detail {

// Random dataset of 1..500 records in keyed groups; each group has one
// confidence. Classes are drawn independently of correctness.
inline std::vector<PredictionRecord> random_grouped_records(Rng& rng, int num_classes) {
  const std::size_t n = 1 + rng.uniform_index(500);
  const std::size_t groups = 1 + rng.uniform_index(std::min<std::size_t>(n, 30));
  std::vector<double> conf(groups), acc(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    conf[g] = rng.uniform();
    acc[g] = rng.uniform();
  }
  std::vector<PredictionRecord> recs(n);
  for (auto& r : recs) {
    const std::size_t g = rng.uniform_index(groups);
    r.confidence = conf[g];
    r.correct = rng.bernoulli(acc[g]) ? 1 : 0;
    r.group_key = std::to_string(g);
    r.true_class = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(num_classes)));
  }
  return recs;
}

}  // namespace detail

/// exact_conditional_ece <= l1_risk.
inline InvariantResult check_jensen_chain(const GradcheckOptions& o) {
  detail::Tracker t("jensen_exact_ece_le_l1", 1e-12);
  for (std::size_t d = 0; d < o.dataset_samples; ++d) {
    Rng rng = Rng::derive(o.seed, "gradcheck/jensen", d);
    const auto recs = detail::random_grouped_records(rng, 2);
    const double excess = exact_conditional_ece(recs) - l1_risk(recs);
    t.observe(excess, excess <= 1e-12, [&] { return records_to_csv(recs); });
  }
  return t.done();
}

/// exact_conditional_ece <= classwise_ece <= l1_risk.
inline InvariantResult check_classwise_chain(const GradcheckOptions& o) {
  detail::Tracker t("exact_le_classwise_le_l1", 1e-12);
  for (std::size_t d = 0; d < o.dataset_samples; ++d) {
    Rng rng = Rng::derive(o.seed, "gradcheck/classwise", d);
    const int k = 2 + static_cast<int>(rng.uniform_index(4));
    const auto recs = detail::random_grouped_records(rng, k);
    const double e = exact_conditional_ece(recs), cw = classwise_ece(recs, k), l1 = l1_risk(recs);
    const double excess = std::max(e - cw, cw - l1);
    t.observe(excess, excess <= 1e-12, [&] { return records_to_csv(recs); });
  }
  return t.done();
}

/// weighted_ece <= w_max * exact_conditional_ece for group-constant weights in [0, w_max].
inline InvariantResult check_weighted_bound(const GradcheckOptions& o) {
  detail::Tracker t("weighted_ece_le_wmax_exact", 1e-12);
  for (std::size_t d = 0; d < o.dataset_samples; ++d) {
    Rng rng = Rng::derive(o.seed, "gradcheck/weighted", d);
    const auto recs = detail::random_grouped_records(rng, 2);
    const double w_max = rng.uniform(0.0, 3.0);
    std::map<std::string, double> wg;
    std::vector<double> w;
    for (const auto& r : recs) {
      auto it = wg.find(*r.group_key);
      if (it == wg.end()) it = wg.emplace(*r.group_key, rng.uniform(0.0, w_max)).first;
      w.push_back(it->second);
    }
    const double excess = weighted_ece(recs, w) - w_max * exact_conditional_ece(recs);
    t.observe(excess, excess <= 1e-12, [&] { return "w_max=" + io::fmt_double(w_max); });
  }
  return t.done();
}

inline constexpr const char* kGradcheckHeader = "invariant,samples,violations,max_observed,bound,passed";

inline std::string gradcheck_to_csv(const GradcheckReport& rep) {
  std::ostringstream out;
  out << kGradcheckHeader << '\n';
  for (const auto& r : rep.results) {
    out << r.name << ',' << r.samples << ',' << r.violations << ',' << io::fmt_double(r.max_observed) << ','
        << io::fmt_double(r.bound) << ',' << (r.passed() ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace calpo
