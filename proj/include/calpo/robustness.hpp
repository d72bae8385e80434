#pragma once

// Mean versus median under the contamination model
//   S ~ (1 - alpha) F0(. - z) + alpha delta_{z + M},
// with F0 uniform or triangular on [-B, B].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/io.hpp"
#include "calpo/rng.hpp"

namespace calpo {

enum class CleanFamily { uniform, triangular };

inline const char* family_name(CleanFamily f) {
  return f == CleanFamily::uniform ? "uniform" : "triangular";
}

inline CleanFamily family_from_name(const std::string& s) {
  if (s == "uniform") return CleanFamily::uniform;
  if (s == "triangular") return CleanFamily::triangular;
  throw InvalidInput("unknown clean family '" + s + "'");
}

struct ContaminationModel {
  double z = 0.0;
  double alpha = 0.1;
  double M = 10.0;
  CleanFamily family = CleanFamily::uniform;
  double B = 1.0;
  std::uint64_t seed = 0;
};

inline void validate_model(const ContaminationModel& m) {
  require(std::isfinite(m.z) && std::isfinite(m.M), "z and M must be finite");
  require(m.alpha >= 0.0 && m.alpha < 0.5, "alpha must lie in [0, 0.5)");
  require(m.B > 0.0 && std::isfinite(m.B), "B must be positive");
}

// Clean family CDF, quantile and density on [-B, B].

inline double clean_cdf(CleanFamily f, double B, double t) {
  if (t <= -B) return 0.0;
  if (t >= B) return 1.0;
  if (f == CleanFamily::uniform) return (t + B) / (2.0 * B);
  if (t < 0.0) return (B + t) * (B + t) / (2.0 * B * B);
  return 1.0 - (B - t) * (B - t) / (2.0 * B * B);
}

inline double clean_quantile(CleanFamily f, double B, double p) {
  require(p >= 0.0 && p <= 1.0, "quantile level outside [0,1]");
  if (f == CleanFamily::uniform) return 2.0 * B * p - B;
  if (p < 0.5) return -B + B * std::sqrt(2.0 * p);
  return B - B * std::sqrt(2.0 * (1.0 - p));
}

inline double clean_density(CleanFamily f, double B, double t) {
  if (t < -B || t > B) return 0.0;
  if (f == CleanFamily::uniform) return 1.0 / (2.0 * B);
  return (B - std::abs(t)) / (B * B);
}

inline double sample_clean(CleanFamily f, double B, Rng& rng) {
  return clean_quantile(f, B, rng.uniform());
}

struct SurrogateSample {
  std::vector<double> values;
  std::size_t outliers = 0;  // K
};

inline SurrogateSample sample_surrogate(const ContaminationModel& m, std::size_t n, Rng& rng) {
  validate_model(m);
  require(n >= 1, "sample size must be positive");
  SurrogateSample s;
  s.values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.bernoulli(m.alpha)) {
      s.values.push_back(m.z + m.M);
      ++s.outliers;
    } else {
      s.values.push_back(m.z + sample_clean(m.family, m.B, rng));
    }
  }
  return s;
}

inline SurrogateSample sample_surrogate(const ContaminationModel& m, std::size_t n) {
  Rng rng = Rng::derive(m.seed, "contamination/sample");
  return sample_surrogate(m, n, rng);
}

/// Exactly `outliers` draws at z + offset, the rest from the clean component.
inline SurrogateSample inject_outliers(const ContaminationModel& m, std::size_t n, std::size_t outliers,
                                       double offset, Rng& rng) {
  require(outliers <= n, "more outliers than draws");
  SurrogateSample s;
  s.outliers = outliers;
  for (std::size_t i = 0; i < n; ++i) {
    s.values.push_back(i < outliers ? m.z + offset : m.z + sample_clean(m.family, m.B, rng));
  }
  rng.shuffle(s.values);
  return s;
}

inline double sample_mean(const std::vector<double>& v) {
  require(!v.empty(), "mean of empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Middle order statistic; the average of the two middle values for even n.
inline double sample_median(std::vector<double> v) {
  require(!v.empty(), "median of empty sample");
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

struct AnalyticBiases {
  double mean_bias = 0.0;      // alpha M (clean mean is 0)
  double median_offset = 0.0;  // Delta_alpha
};

namespace detail {

// Population median offset of the mixture for M >= 0.
inline double mixture_median_offset(CleanFamily f, double B, double alpha, double M) {
  const double t1 = clean_quantile(f, B, std::min(1.0, 0.5 / (1.0 - alpha)));
  if (t1 < M) return t1;
  if ((1.0 - alpha) * clean_cdf(f, B, M) + alpha >= 0.5) return M;
  return clean_quantile(f, B, (0.5 - alpha) / (1.0 - alpha));
}

}  // namespace detail

inline AnalyticBiases analytic_biases(const ContaminationModel& m) {
  validate_model(m);
  AnalyticBiases a;
  a.mean_bias = m.alpha * m.M;
  // Both families are symmetric, so negative offsets mirror positive ones.
  a.median_offset = m.M >= 0.0 ? detail::mixture_median_offset(m.family, m.B, m.alpha, m.M)
                               : -detail::mixture_median_offset(m.family, m.B, m.alpha, -m.M);
  return a;
}

/// Density lower bound used by the DKW bound: f0 at the population median.
inline double median_density(const ContaminationModel& m) {
  if (m.family == CleanFamily::uniform) return 1.0 / (2.0 * m.B);
  return clean_density(m.family, m.B, analytic_biases(m).median_offset);
}

struct EstimatorReport {
  double alpha = 0.0;
  double M = 0.0;
  double B = 0.0;
  CleanFamily family = CleanFamily::uniform;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double empirical_mean = 0.0;
  double empirical_median = 0.0;
  double analytic_mean = 0.0;
  double analytic_median = 0.0;
  std::size_t outliers = 0;
};

inline EstimatorReport estimate(const ContaminationModel& m, std::size_t n) {
  const auto s = sample_surrogate(m, n);
  const auto a = analytic_biases(m);
  EstimatorReport r;
  r.alpha = m.alpha;
  r.M = m.M;
  r.B = m.B;
  r.family = m.family;
  r.n = n;
  r.seed = m.seed;
  r.empirical_mean = sample_mean(s.values);
  r.empirical_median = sample_median(s.values);
  r.analytic_mean = m.z + a.mean_bias;
  r.analytic_median = m.z + a.median_offset;
  r.outliers = s.outliers;
  return r;
}

/// One report per (alpha, M, seed). Seeds are derived from (master, alpha, M index, seed).
inline std::vector<EstimatorReport> verify_contamination_theorem(const ContaminationModel& base,
                                                                 const std::vector<double>& alphas,
                                                                 const std::vector<double>& Ms,
                                                                 std::size_t n,
                                                                 const std::vector<std::uint64_t>& seeds) {
  require(!alphas.empty() && !Ms.empty() && !seeds.empty(), "empty contamination grid");
  std::vector<EstimatorReport> out;
  for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
    for (std::size_t mi = 0; mi < Ms.size(); ++mi) {
      for (std::uint64_t seed : seeds) {
        ContaminationModel m = base;
        m.alpha = alphas[ai];
        m.M = Ms[mi];
        // Same stream for every M at a given (alpha, seed): only the outlier location moves.
        m.seed = Rng::derive(base.seed, "contamination/cell", ai * 1000003ULL + seed).next();
        auto r = estimate(m, n);
        r.seed = seed;
        out.push_back(r);
      }
    }
  }
  return out;
}

/// Least-squares slope of empirical mean against M.
inline double mean_slope(const std::vector<EstimatorReport>& rows) {
  require(rows.size() >= 2, "slope needs at least two rows");
  double mx = 0.0, my = 0.0;
  for (const auto& r : rows) {
    mx += r.M;
    my += r.empirical_mean;
  }
  mx /= static_cast<double>(rows.size());
  my /= static_cast<double>(rows.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& r : rows) {
    sxy += (r.M - mx) * (r.empirical_mean - my);
    sxx += (r.M - mx) * (r.M - mx);
  }
  require(sxx > 0.0, "slope needs at least two distinct M values");
  return sxy / sxx;
}

inline constexpr const char* kContaminationHeader =
    "alpha,M,B,family,n,seed,empirical_mean,empirical_median,analytic_mean,analytic_median,K";

inline std::string contamination_to_csv(const std::vector<EstimatorReport>& rows) {
  std::ostringstream out;
  out << kContaminationHeader << '\n';
  for (const auto& r : rows) {
    out << io::fmt_double(r.alpha) << ',' << io::fmt_double(r.M) << ',' << io::fmt_double(r.B) << ','
        << family_name(r.family) << ',' << r.n << ',' << r.seed << ',' << io::fmt_double(r.empirical_mean)
        << ',' << io::fmt_double(r.empirical_median) << ',' << io::fmt_double(r.analytic_mean) << ','
        << io::fmt_double(r.analytic_median) << ',' << r.outliers << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Finite-sample checks

struct DkwResult {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double threshold = 0.0;  // rho / ((1 - alpha) f_min)
  double bound = 0.0;      // 2 exp(-2 n (rho - 1/n)^2)

  double frequency() const { return static_cast<double>(violations) / static_cast<double>(trials); }
  double slack() const { return 3.0 * std::sqrt(std::max(bound * (1.0 - bound), 0.0) / static_cast<double>(trials)); }
  bool passed() const { return frequency() <= bound + slack(); }
};

inline DkwResult dkw_check(const ContaminationModel& m, std::size_t n, std::size_t trials, double rho) {
  validate_model(m);
  require(n >= 1 && trials >= 1, "n and trials must be positive");
  require(rho > 1.0 / static_cast<double>(n), "rho must exceed 1/n");
  DkwResult r;
  r.trials = trials;
  const double f_min = median_density(m);
  require(f_min > 0.0, "density at the median is zero");
  r.threshold = rho / ((1.0 - m.alpha) * f_min);
  const double gap = rho - 1.0 / static_cast<double>(n);
  r.bound = std::min(1.0, 2.0 * std::exp(-2.0 * static_cast<double>(n) * gap * gap));
  const double target = m.z + analytic_biases(m).median_offset;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(m.seed, "contamination/dkw", t);
    const double med = sample_median(sample_surrogate(m, n, rng).values);
    if (std::abs(med - target) > r.threshold) ++r.violations;
  }
  return r;
}

struct MedianStabilityResult {
  std::size_t checked = 0;
  std::size_t violations = 0;
  double worst_distance = 0.0;  // max |median - z|
};

/// Injects K < n/2 outliers at z + offset for each K in `counts` and checks the
/// median stays within [z - B, z + B].
inline MedianStabilityResult median_stability(const ContaminationModel& m, std::size_t n,
                                              const std::vector<std::size_t>& counts, double offset) {
  MedianStabilityResult r;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    require(2 * counts[i] < n, "median stability needs K < n/2");
    Rng rng = Rng::derive(m.seed, "contamination/inject", i);
    const double med = sample_median(inject_outliers(m, n, counts[i], offset, rng).values);
    ++r.checked;
    const double d = std::abs(med - m.z);
    r.worst_distance = std::max(r.worst_distance, d);
    if (d > m.B) ++r.violations;
  }
  return r;
}

/// Median with K > n/2 outliers injected at z + M.
inline double breakdown_median(const ContaminationModel& m, std::size_t n, std::size_t outliers) {
  require(2 * outliers > n, "breakdown needs K > n/2");
  Rng rng = Rng::derive(m.seed, "contamination/breakdown");
  return sample_median(inject_outliers(m, n, outliers, m.M, rng).values);
}

struct MeanBandResult {
  std::size_t trials = 0;
  std::size_t inside = 0;
  double required = 0.0;  // 1 - 2 exp(-2 tau^2 n) - 3 sigma

  double fraction() const { return static_cast<double>(inside) / static_cast<double>(trials); }
  bool passed() const { return fraction() >= required; }
};

/// Fraction of trials whose mean lies in z + [(alpha - tau) M - B, (alpha + tau) M + B], tau = alpha / 2.
inline MeanBandResult mean_bias_band(const ContaminationModel& m, std::size_t n, std::size_t trials) {
  validate_model(m);
  require(m.M >= 0.0, "mean band assumes M >= 0");
  MeanBandResult r;
  r.trials = trials;
  const double tau = m.alpha / 2.0;
  const double p = std::max(0.0, 1.0 - 2.0 * std::exp(-2.0 * tau * tau * static_cast<double>(n)));
  r.required = p - 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  const double lo = m.z + (m.alpha - tau) * m.M - m.B;
  const double hi = m.z + (m.alpha + tau) * m.M + m.B;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(m.seed, "contamination/band", t);
    const double mean = sample_mean(sample_surrogate(m, n, rng).values);
    if (mean >= lo && mean <= hi) ++r.inside;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pointwise Bayes-risk minimizers for Z ~ Bernoulli(z)

struct RiskMinimizers {
  double l2_argmin = 0.0;
  std::vector<double> l1_argmins;  // every grid point within 1e-12 of the minimum
  double surrogate_argmin = 0.0;   // argmin |c - z_tilde|
};

inline std::vector<double> unit_grid(double step) {
  require(step > 0.0 && step <= 1.0, "grid step must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
  std::vector<double> g;
  for (std::size_t i = 0; i <= n; ++i) g.push_back(static_cast<double>(i) / static_cast<double>(n));
  return g;
}

inline RiskMinimizers pointwise_risk_minimizers(double z, const std::vector<double>& grid, double z_tilde) {
  require(!grid.empty(), "empty grid");
  require(z >= 0.0 && z <= 1.0 && z_tilde >= 0.0 && z_tilde <= 1.0, "z and z_tilde must lie in [0,1]");
  RiskMinimizers r;
  double best_l2 = std::numeric_limits<double>::infinity();
  double best_l1 = std::numeric_limits<double>::infinity();
  double best_s = std::numeric_limits<double>::infinity();
  std::vector<double> l1(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double c = grid[i];
    const double l2 = z * (1.0 - c) * (1.0 - c) + (1.0 - z) * c * c;
    l1[i] = z * (1.0 - c) + (1.0 - z) * c;
    const double s = std::abs(c - z_tilde);
    if (l2 < best_l2) {
      best_l2 = l2;
      r.l2_argmin = c;
    }
    best_l1 = std::min(best_l1, l1[i]);
    if (s < best_s) {
      best_s = s;
      r.surrogate_argmin = c;
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (l1[i] <= best_l1 + 1e-12) r.l1_argmins.push_back(grid[i]);
  }
  return r;
}

}  // namespace calpo
