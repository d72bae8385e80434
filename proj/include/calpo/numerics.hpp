#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "calpo/errors.hpp"

namespace calpo {

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  require(!values.empty(), "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

inline double log_sum_exp(std::span<const double> values) {
  const double m = values[argmax(values)];
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  require(!logits.empty(), "softmax: empty logit vector");
  require(all_finite(logits), "softmax: non-finite logit");
  const double m = logits[argmax(logits)];
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  require(!logits.empty(), "log_softmax: empty logit vector");
  require(all_finite(logits), "log_softmax: non-finite logit");
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

// Branch-stable: the exponential is always of a non-positive number.
inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

/// log(1 + e^u) without overflow.
inline double softplus(double u) {
  if (u > 0.0) return u + std::log1p(std::exp(-u));
  return std::log1p(std::exp(u));
}

inline double log_sigmoid(double u) { return -softplus(-u); }

/// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h.
template <class F>
std::vector<double> finite_diff_gradient(F&& f, std::span<const double> point,
                                         double h = 1e-5) {
  require(h > 0.0, "finite_diff_gradient: step must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(std::span<const double>(x));
    x[i] = saved - h;
    const double down = f(std::span<const double>(x));
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalDivergence("finite_diff_gradient: non-finite evaluation at coordinate " +
                                std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double relative_error(std::span<const double> analytic,
                             std::span<const double> reference,
                             double floor = 1e-8) {
  require(analytic.size() == reference.size(), "relative_error: size mismatch");
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - reference[i]));
    scale = std::max(scale, std::abs(reference[i]));
  }
  return diff / scale;
}

}  // namespace calpo
