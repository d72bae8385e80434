// Binned and exact-conditional ECE for a handful of predictions.
#include <cstdio>
#include <vector>

#include "calpo/metrics.hpp"

int main() {
  using calpo::PredictionRecord;
  std::vector<PredictionRecord> recs = {
      {0.9, 1, 0, "a", 0.5}, {0.9, 0, 1, "a", 0.5}, {0.2, 0, 1, "b", 0.0}, {0.2, 0, 0, "b", 0.0}};
  const auto s = calpo::summarize(recs, 10);
  std::printf("binned ECE   %.4f\n", s.ece_binned);
  std::printf("L1 risk      %.4f\n", s.l1_risk);
  std::printf("exact ECE    %.4f\n", *s.exact_ece);
  std::printf("noise term   %.4f\n", *s.noise_term);
  std::printf("%s", calpo::reliability_to_csv(calpo::reliability_diagram(recs, 10)).c_str());
}
