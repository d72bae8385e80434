#pragma once

// Margin-based correctness surrogate and the per-token calibration loss
//
//   z~(x)        = sigmoid(p_truth(x) - max_{y != truth} p_y(x))
//   l(z~, c)     = z~ (1 - c) + (1 - z~) c
//   L_cal(y)     = (1/T) sum_t l(target_t, c_t),   c_t = max_y pi(y | x_t)
//
// Gradients treat the surrogate target as a constant (stop-gradient) and flow
// only through the confidence c_t.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/numerics.hpp"

namespace calpo {

struct TokenContext {
  std::vector<double> probs;
  std::size_t truth = 0;
};

struct MarginDetail {
  double value = 0.0;
  std::size_t competitor = 0;  // strongest non-truth token, lowest index on ties
};

struct TokenCalGrad {
  double d_loss_d_confidence = 0.0;
  std::vector<double> d_loss_d_logits;
};

enum class TargetMode { surrogate, one_minus_surrogate };

inline void validate_context(const TokenContext& ctx) {
  require(ctx.probs.size() >= 2, "token context needs at least two vocabulary entries");
  require(ctx.truth < ctx.probs.size(), "truth index outside vocabulary");
}

inline MarginDetail margin_detail(const TokenContext& ctx) {
  validate_context(ctx);
  MarginDetail d;
  bool first = true;
  double best = 0.0;
  for (std::size_t y = 0; y < ctx.probs.size(); ++y) {
    if (y == ctx.truth) continue;
    if (first || ctx.probs[y] > best) {
      best = ctx.probs[y];
      d.competitor = y;
      first = false;
    }
  }
  d.value = ctx.probs[ctx.truth] - best;
  return d;
}

inline double margin(const TokenContext& ctx) { return margin_detail(ctx).value; }

inline double surrogate(const TokenContext& ctx) { return sigmoid(margin(ctx)); }

/// Index of the confidence token (argmax, lowest index on ties).
inline std::size_t confidence_index(std::span<const double> probs) { return argmax(probs); }

inline double confidence(std::span<const double> probs) { return probs[argmax(probs)]; }

inline double token_cal_loss(double z_tilde, double c) {
  require(z_tilde >= 0.0 && z_tilde <= 1.0, "token_cal_loss: target outside [0,1]");
  require(c >= 0.0 && c <= 1.0, "token_cal_loss: confidence outside [0,1]");
  return z_tilde * (1.0 - c) + (1.0 - z_tilde) * c;
}

inline double token_target(const TokenContext& ctx, TargetMode mode) {
  const double z = surrogate(ctx);
  return mode == TargetMode::surrogate ? z : 1.0 - z;
}

inline std::vector<double> token_targets(std::span<const TokenContext> tokens, TargetMode mode) {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(token_target(t, mode));
  return out;
}

inline double seq_cal_loss(std::span<const TokenContext> tokens, TargetMode mode) {
  require(!tokens.empty(), "seq_cal_loss: empty token list");
  double s = 0.0;
  for (const auto& t : tokens) s += token_cal_loss(token_target(t, mode), confidence(t.probs));
  return s / static_cast<double>(tokens.size());
}

/// Calibration loss of a sequence given its logits and frozen targets; the
/// function differentiated by the finite-difference oracle.
inline double seq_cal_loss_frozen(std::span<const std::vector<double>> logits,
                                  std::span<const double> targets) {
  require(!logits.empty() && logits.size() == targets.size(), "seq_cal_loss_frozen: shape mismatch");
  double s = 0.0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    s += token_cal_loss(targets[t], confidence(softmax(logits[t])));
  }
  return s / static_cast<double>(logits.size());
}

/// dc/dlogit_j for c = p_a: p_a (delta_aj - p_j).
inline std::vector<double> confidence_logit_gradient(std::span<const double> probs) {
  const std::size_t a = confidence_index(probs);
  const double c = probs[a];
  std::vector<double> g(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] = c * ((j == a ? 1.0 : 0.0) - probs[j]);
  return g;
}

/// Per-token gradients of the summand l(target_t, c_t). The gradient of
/// seq_cal_loss is these divided by T.
inline std::vector<TokenCalGrad> cal_loss_gradient(std::span<const TokenContext> tokens,
                                                   TargetMode mode,
                                                   std::span<const std::vector<double>> logits) {
  require(!tokens.empty(), "cal_loss_gradient: empty token list");
  require(tokens.size() == logits.size(), "cal_loss_gradient: one logit vector per token required");
  std::vector<TokenCalGrad> out;
  out.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    require(logits[t].size() == tokens[t].probs.size(), "cal_loss_gradient: vocabulary size mismatch");
    const auto probs = softmax(logits[t]);
    TokenCalGrad g;
    g.d_loss_d_confidence = 1.0 - 2.0 * token_target(tokens[t], mode);
    g.d_loss_d_logits = confidence_logit_gradient(probs);
    for (double& v : g.d_loss_d_logits) v *= g.d_loss_d_confidence;
    out.push_back(std::move(g));
  }
  return out;
}

inline constexpr double kBceEps = 1e-12;

inline double clamp_confidence(double c) { return std::min(std::max(c, kBceEps), 1.0 - kBceEps); }

/// -[z log c + (1 - z) log(1 - c)] with c clamped to [eps, 1 - eps].
inline double bce_cal_loss(double z_tilde, double c) {
  require(z_tilde >= 0.0 && z_tilde <= 1.0, "bce_cal_loss: target outside [0,1]");
  const double cc = clamp_confidence(c);
  return -(z_tilde * std::log(cc) + (1.0 - z_tilde) * std::log1p(-cc));
}

/// d bce / dc; zero where the clamp is active.
inline double bce_d_confidence(double z_tilde, double c) {
  if (c <= kBceEps || c >= 1.0 - kBceEps) return 0.0;
  return (c - z_tilde) / (c * (1.0 - c));
}

/// Gradient of bce(target, c) with respect to the token's logits.
inline std::vector<double> bce_logit_gradient(double z_tilde, std::span<const double> probs) {
  const std::size_t a = confidence_index(probs);
  const double c = probs[a];
  std::vector<double> g(probs.size(), 0.0);
  if (c <= kBceEps || c >= 1.0 - kBceEps) return g;
  // (c - z) / (c (1 - c)) * c (delta_aj - p_j) = (c - z) (delta_aj - p_j) / (1 - c)
  const double scale = (c - z_tilde) / (1.0 - c);
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] = scale * ((j == a ? 1.0 : 0.0) - probs[j]);
  return g;
}

}  // namespace calpo
