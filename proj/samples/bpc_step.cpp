// One gradient step of DPO with the calibration term on a single pair.
#include <cstdio>
#include <vector>

#include "calpo/preference.hpp"

int main() {
  calpo::TabularPolicy reference(1, 4);
  calpo::TabularPolicy policy = reference;
  policy.logits(calpo::State{0, calpo::kStartToken})[1] = 1.5;

  const calpo::PreferencePair pair{0, {1}, {2}};
  const double beta = 0.1, lambda = 0.1;
  std::vector<double> grad(policy.num_parameters(), 0.0);
  std::printf("joint loss before %.6f\n", calpo::joint_loss(policy, reference, pair, beta, lambda));
  calpo::add_joint_gradient(policy, reference, pair, beta, lambda, grad);
  calpo::apply_gradient_step(policy, grad, 1, calpo::StepSchedule{calpo::ScheduleKind::constant, 1.0});
  std::printf("joint loss after  %.6f\n", calpo::joint_loss(policy, reference, pair, beta, lambda));
  std::printf("lambda bound at margin %.4f: %.4f\n",
              calpo::preference_score(policy, reference, pair, beta).dpo_margin,
              calpo::lambda_bound(calpo::preference_score(policy, reference, pair, beta).dpo_margin, 1));
}
