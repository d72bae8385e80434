#pragma once

// Calibration metrics over prediction records: binned ECE and reliability
// data, L1 calibration risk, exact-conditional ECE (grouped by context key),
// the L1 = ECE + conditional-noise decomposition, classwise and reweighted
// ECE. All values are fractions in [0, 1].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calpo/errors.hpp"
#include "calpo/io.hpp"

namespace calpo {

struct PredictionRecord {
  double confidence = 0.0;
  int correct = 0;
  std::optional<int> true_class;
  std::optional<std::string> group_key;
  std::optional<double> oracle_z;
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;  // 0 for empty bins
  double accuracy = 0.0;         // 0 for empty bins
  double gap = 0.0;

  bool operator==(const ReliabilityBin&) const = default;
};

struct BinnedReliability {
  std::size_t num_bins = 0;
  std::size_t total = 0;
  std::vector<ReliabilityBin> bins;

  /// Recomputes the binned ECE from the per-bin data.
  double ece() const {
    double e = 0.0;
    for (const auto& b : bins) {
      if (b.count == 0) continue;
      e += (static_cast<double>(b.count) / static_cast<double>(total)) * b.gap;
    }
    return e;
  }

  bool operator==(const BinnedReliability&) const = default;
};

struct CalibrationSummary {
  double ece_binned = 0.0;
  double l1_risk = 0.0;
  std::optional<double> exact_ece;
  std::optional<double> cw_ece;
  std::optional<double> noise_term;
};

namespace detail {

inline void validate(std::span<const PredictionRecord> records) {
  require(!records.empty(), "no prediction records");
  for (const auto& r : records) {
    require(std::isfinite(r.confidence) && r.confidence >= 0.0 && r.confidence <= 1.0,
            "confidence outside [0,1]");
    require(r.correct == 0 || r.correct == 1, "correct must be 0 or 1");
    if (r.oracle_z) require(*r.oracle_z >= 0.0 && *r.oracle_z <= 1.0, "oracle_z outside [0,1]");
  }
}

struct GroupStats {
  std::size_t count = 0;
  double sum_correct = 0.0;
  double sum_confidence = 0.0;
  double weight = 0.0;
};

inline std::map<std::string, GroupStats> group_by_key(std::span<const PredictionRecord> records) {
  std::map<std::string, GroupStats> groups;
  for (const auto& r : records) {
    require(r.group_key.has_value(), "record is missing group_key");
    auto& g = groups[*r.group_key];
    ++g.count;
    g.sum_correct += r.correct;
    g.sum_confidence += r.confidence;
  }
  return groups;
}

}  // namespace detail

/// Bin of a confidence for M equal-width bins [i/M, (i+1)/M), last bin closed.
inline std::size_t bin_index(double confidence, std::size_t num_bins) {
  const double m = static_cast<double>(num_bins);
  auto idx = static_cast<std::size_t>(std::floor(confidence * m));
  if (idx >= num_bins) idx = num_bins - 1;
  // Keep the index consistent with the edges as they are represented in double.
  while (idx > 0 && confidence < static_cast<double>(idx) / m) --idx;
  while (idx + 1 < num_bins && confidence >= static_cast<double>(idx + 1) / m) ++idx;
  return idx;
}

inline BinnedReliability reliability_diagram(std::span<const PredictionRecord> records,
                                             std::size_t num_bins) {
  detail::validate(records);
  require(num_bins >= 1, "num_bins must be at least 1");
  BinnedReliability out;
  out.num_bins = num_bins;
  out.total = records.size();
  out.bins.resize(num_bins);
  std::vector<double> sum_conf(num_bins, 0.0), sum_correct(num_bins, 0.0);
  for (const auto& r : records) {
    const std::size_t b = bin_index(r.confidence, num_bins);
    ++out.bins[b].count;
    sum_conf[b] += r.confidence;
    sum_correct[b] += r.correct;
  }
  const double m = static_cast<double>(num_bins);
  for (std::size_t b = 0; b < num_bins; ++b) {
    auto& bin = out.bins[b];
    bin.lower = static_cast<double>(b) / m;
    bin.upper = static_cast<double>(b + 1) / m;
    if (bin.count == 0) continue;
    const double n = static_cast<double>(bin.count);
    bin.mean_confidence = sum_conf[b] / n;
    bin.accuracy = sum_correct[b] / n;
    bin.gap = std::abs(bin.accuracy - bin.mean_confidence);
  }
  return out;
}

/// Binned expected calibration error: sum_m |B_m|/N * |acc(B_m) - conf(B_m)|.
inline double ece_binned(std::span<const PredictionRecord> records, std::size_t num_bins) {
  return reliability_diagram(records, num_bins).ece();
}

/// Mean of |confidence - correct|.
inline double l1_risk(std::span<const PredictionRecord> records) {
  detail::validate(records);
  double s = 0.0;
  for (const auto& r : records) s += std::abs(r.confidence - r.correct);
  return s / static_cast<double>(records.size());
}

/// ECE with exact conditional expectations: records sharing a group_key form
/// one conditioning cell, no binning.
inline double exact_conditional_ece(std::span<const PredictionRecord> records) {
  detail::validate(records);
  const auto groups = detail::group_by_key(records);
  double e = 0.0;
  for (const auto& [key, g] : groups) {
    const double n = static_cast<double>(g.count);
    e += n * std::abs(g.sum_correct / n - g.sum_confidence / n);
  }
  return e / static_cast<double>(records.size());
}

/// 2 * mean of min{z(1-c), c(1-z)} using each record's oracle_z.
inline double decomposition_noise_term(std::span<const PredictionRecord> records) {
  detail::validate(records);
  double s = 0.0;
  for (const auto& r : records) {
    require(r.oracle_z.has_value(), "record is missing oracle_z");
    const double z = *r.oracle_z;
    const double c = r.confidence;
    s += std::min(z * (1.0 - c), c * (1.0 - z));
  }
  return 2.0 * s / static_cast<double>(records.size());
}

/// Mean of |oracle_z - confidence|: the population ECE when every record is a
/// distinct context whose true correctness probability is known.
inline double oracle_ece(std::span<const PredictionRecord> records) {
  detail::validate(records);
  double s = 0.0;
  for (const auto& r : records) {
    require(r.oracle_z.has_value(), "record is missing oracle_z");
    s += std::abs(*r.oracle_z - r.confidence);
  }
  return s / static_cast<double>(records.size());
}

/// Class-frequency weighted ECE: sum_k P(Y=k) * exact ECE within class k.
inline double classwise_ece(std::span<const PredictionRecord> records, int num_classes) {
  detail::validate(records);
  require(num_classes >= 1, "num_classes must be positive");
  std::vector<std::vector<PredictionRecord>> by_class(static_cast<std::size_t>(num_classes));
  for (const auto& r : records) {
    require(r.true_class.has_value(), "record is missing true_class");
    require(*r.true_class >= 0 && *r.true_class < num_classes, "true_class out of range");
    require(r.group_key.has_value(), "record is missing group_key");
    by_class[static_cast<std::size_t>(*r.true_class)].push_back(r);
  }
  double total = 0.0;
  const double n = static_cast<double>(records.size());
  for (const auto& cls : by_class) {
    if (cls.empty()) continue;
    total += (static_cast<double>(cls.size()) / n) * exact_conditional_ece(cls);
  }
  return total;
}

/// sum_g |g|/N * w(g) * |acc(g) - conf(g)|; weights must be constant per group.
inline double weighted_ece(std::span<const PredictionRecord> records,
                           std::span<const double> weights) {
  detail::validate(records);
  require(weights.size() == records.size(), "one weight per record required");
  std::map<std::string, detail::GroupStats> groups;
  std::map<std::string, bool> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    require(std::isfinite(weights[i]) && weights[i] >= 0.0, "weights must be finite and >= 0");
    require(r.group_key.has_value(), "record is missing group_key");
    auto& g = groups[*r.group_key];
    if (seen[*r.group_key]) {
      require(g.weight == weights[i], "weight must be constant within a group");
    } else {
      seen[*r.group_key] = true;
      g.weight = weights[i];
    }
    ++g.count;
    g.sum_correct += r.correct;
    g.sum_confidence += r.confidence;
  }
  double e = 0.0;
  for (const auto& [key, g] : groups) {
    const double n = static_cast<double>(g.count);
    e += n * g.weight * std::abs(g.sum_correct / n - g.sum_confidence / n);
  }
  return e / static_cast<double>(records.size());
}

inline CalibrationSummary summarize(std::span<const PredictionRecord> records,
                                    std::size_t num_bins,
                                    std::optional<int> num_classes = std::nullopt) {
  CalibrationSummary s;
  s.ece_binned = ece_binned(records, num_bins);
  s.l1_risk = l1_risk(records);
  const bool keyed = std::all_of(records.begin(), records.end(),
                                 [](const auto& r) { return r.group_key.has_value(); });
  const bool has_z = std::all_of(records.begin(), records.end(),
                                 [](const auto& r) { return r.oracle_z.has_value(); });
  const bool has_class = std::all_of(records.begin(), records.end(),
                                     [](const auto& r) { return r.true_class.has_value(); });
  if (keyed) s.exact_ece = exact_conditional_ece(records);
  if (has_z) s.noise_term = decomposition_noise_term(records);
  if (keyed && has_class) {
    int k = num_classes.value_or(0);
    for (const auto& r : records) k = std::max(k, *r.true_class + 1);
    s.cw_ece = classwise_ece(records, k);
  }
  return s;
}

// ---------------------------------------------------------------------------
// CSV schemas

inline constexpr const char* kReliabilityHeader =
    "bin_lower,bin_upper,count,mean_confidence,accuracy,gap";
inline constexpr const char* kRecordsHeader = "confidence,correct,true_class,group_key,oracle_z";

inline std::string reliability_to_csv(const BinnedReliability& rel) {
  std::ostringstream out;
  out << kReliabilityHeader << '\n';
  for (const auto& b : rel.bins) {
    out << io::fmt_double(b.lower) << ',' << io::fmt_double(b.upper) << ',' << b.count << ',';
    if (b.count == 0) {
      out << ",,0\n";
    } else {
      out << io::fmt_double(b.mean_confidence) << ',' << io::fmt_double(b.accuracy) << ','
          << io::fmt_double(b.gap) << '\n';
    }
  }
  return out.str();
}

inline BinnedReliability reliability_from_csv(std::string_view text) {
  const auto lines = io::read_lines(text);
  require(!lines.empty() && lines[0] == kReliabilityHeader, "reliability CSV: bad header");
  BinnedReliability rel;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = io::split_csv_line(lines[i]);
    require(f.size() == 6, "reliability CSV: expected 6 fields");
    ReliabilityBin b;
    b.lower = io::parse_double(f[0], "bin_lower");
    b.upper = io::parse_double(f[1], "bin_upper");
    b.count = static_cast<std::size_t>(io::parse_int(f[2], "count"));
    if (b.count > 0) {
      b.mean_confidence = io::parse_double(f[3], "mean_confidence");
      b.accuracy = io::parse_double(f[4], "accuracy");
      b.gap = io::parse_double(f[5], "gap");
    }
    rel.total += b.count;
    rel.bins.push_back(b);
  }
  rel.num_bins = rel.bins.size();
  return rel;
}

inline std::string records_to_csv(std::span<const PredictionRecord> records) {
  std::ostringstream out;
  out << kRecordsHeader << '\n';
  for (const auto& r : records) {
    out << io::fmt_double(r.confidence) << ',' << r.correct << ',';
    if (r.true_class) out << *r.true_class;
    out << ',';
    if (r.group_key) out << *r.group_key;
    out << ',';
    if (r.oracle_z) out << io::fmt_double(*r.oracle_z);
    out << '\n';
  }
  return out.str();
}

inline std::vector<PredictionRecord> records_from_csv(std::string_view text) {
  const auto lines = io::read_lines(text);
  require(!lines.empty(), "records CSV: empty input");
  const auto header = io::split_csv_line(lines[0]);
  require(header.size() >= 2 && header[0] == "confidence" && header[1] == "correct",
          "records CSV: header must start with confidence,correct");
  std::vector<PredictionRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = io::split_csv_line(lines[i]);
    require(f.size() >= 2, "records CSV: too few fields on line " + std::to_string(i + 1));
    PredictionRecord r;
    r.confidence = io::parse_double(f[0], "confidence");
    r.correct = static_cast<int>(io::parse_int(f[1], "correct"));
    if (f.size() > 2 && !f[2].empty()) r.true_class = static_cast<int>(io::parse_int(f[2], "true_class"));
    if (f.size() > 3 && !f[3].empty()) r.group_key = f[3];
    if (f.size() > 4 && !f[4].empty()) r.oracle_z = io::parse_double(f[4], "oracle_z");
    out.push_back(std::move(r));
  }
  detail::validate(out);
  return out;
}

}  // namespace calpo
