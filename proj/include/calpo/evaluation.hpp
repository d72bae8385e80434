#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "calpo/metrics.hpp"
#include "calpo/policy.hpp"
#include "calpo/synthdata.hpp"

namespace calpo {

struct PolicyEvaluation {
  double accuracy = 0.0;     // mean over prompts of q_x(greedy label)
  double exact_ece = 0.0;    // mean over prompts of |q_x(greedy label) - confidence|
  double binned_ece = 0.0;   // on held-out label draws
  double l1_risk = 0.0;
  BinnedReliability reliability;
  std::vector<PredictionRecord> records;
};

/// One record per held-out example of `split`: the policy's greedy answer for
/// the prompt scored against the example's sampled label.
inline std::vector<PredictionRecord> prediction_records(const TabularPolicy& policy, const GeneratedDataset& ds,
                                                        Split split) {
  const auto& spec = ds.spec;
  std::vector<GreedyPrediction> greedy;
  greedy.reserve(spec.num_prompts);
  for (std::size_t x = 0; x < spec.num_prompts; ++x) greedy.push_back(greedy_prediction(policy, spec, x));
  std::vector<PredictionRecord> out;
  for (const auto& e : ds.sft) {
    if (e.split != split) continue;
    const auto& g = greedy[e.prompt];
    PredictionRecord r;
    r.confidence = g.confidence;
    r.correct = g.label == e.tokens.back() ? 1 : 0;
    r.true_class = e.tokens.back();
    r.group_key = std::to_string(e.prompt);
    r.oracle_z = spec.is_label(g.label) ? spec.label_distributions[e.prompt][static_cast<std::size_t>(g.label)] : 0.0;
    out.push_back(std::move(r));
  }
  return out;
}

/// Exact-oracle records: one per prompt with correct left at 0; only
/// confidence and oracle_z are meaningful.
inline std::vector<PredictionRecord> oracle_records(const TabularPolicy& policy, const TaskSpec& spec) {
  require(spec.label_distributions.size() == spec.num_prompts, "task spec has no label distributions");
  std::vector<PredictionRecord> out;
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    const auto g = greedy_prediction(policy, spec, x);
    PredictionRecord r;
    r.confidence = g.confidence;
    r.group_key = std::to_string(x);
    r.oracle_z = spec.is_label(g.label) ? spec.label_distributions[x][static_cast<std::size_t>(g.label)] : 0.0;
    out.push_back(std::move(r));
  }
  return out;
}

inline PolicyEvaluation evaluate_policy(const TabularPolicy& policy, const GeneratedDataset& ds,
                                        std::size_t num_bins, Split split = Split::test) {
  PolicyEvaluation ev;
  const auto oracle = oracle_records(policy, ds.spec);
  double acc = 0.0;
  for (const auto& r : oracle) acc += *r.oracle_z;
  ev.accuracy = acc / static_cast<double>(oracle.size());
  ev.exact_ece = oracle_ece(oracle);
  ev.records = prediction_records(policy, ds, split);
  ev.reliability = reliability_diagram(ev.records, num_bins);
  ev.binned_ece = ev.reliability.ece();
  ev.l1_risk = calpo::l1_risk(ev.records);
  return ev;
}

}  // namespace calpo
