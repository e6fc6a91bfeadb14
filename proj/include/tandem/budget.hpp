#pragma once

// Teacher-use budget machinery: shaped rewards with running normalization
// and clipping, the indicator constraint value, and the per-operating-point
// Lagrange multiplier with its dual update.

#include <array>
#include <deque>
#include <span>
#include <string>

#include "tandem/trajectory.hpp"

namespace tandem {

struct BudgetSpec {
  std::string keyword;
  double b = 0.0;  // target teacher-use fraction
};

// The six shipped operating points, in instruction-id order.
const std::array<BudgetSpec, 6>& budget_specs();
constexpr int kNumBudgets = 6;

// How the dual update measures constraint violation from a window of
// per-episode teacher-use fractions f = teacher / total:
//   fraction_of_total   excess = mean(f) - b
//   indicator_balance   excess = mean(f - b * (1 - f)), the per-token sign of
//                       the indicator constraint value
enum class ConstraintAccounting { fraction_of_total, indicator_balance };

struct LagrangeState {
  double lambda = 0.0;
  double eta = 1e-2;  // dual step size
  double cap = 2.0;
  int window_capacity = 50;
  ConstraintAccounting accounting = ConstraintAccounting::fraction_of_total;
  std::deque<double> window;  // trailing per-episode teacher-use fractions

  void push_fraction(double f) {
    window.push_back(f);
    while (static_cast<int>(window.size()) > window_capacity) {
      window.pop_front();
    }
  }
};

struct RewardConfig {
  double clip_lo = -2.0;
  double clip_hi = 2.0;
  double mu_r = 0.0;     // running mean of teacher-token log-likelihoods
  double sigma_r = 1.0;  // running std of student-token log-likelihoods
                         // (as evaluated by the teacher), floored at 1e-6
  int stat_window = 100;

  // EMA internals for sigma_r.
  double student_mean = 0.0;
  double student_var = 1.0;
  bool frozen = false;  // evaluation runs keep statistics fixed
};

double normalize_reward(const RewardConfig& cfg, double r);

// Shaped per-token reward: student-origin tokens earn the normalized teacher
// log-likelihood plus the lambda*b bonus; delegated tokens earn the
// lambda*(b-1) penalty. The total is clipped to [clip_lo, clip_hi].
double shaped_reward(TokenOrigin origin, double teacher_logprob, double lambda,
                     double b, const RewardConfig& cfg);

// Discounted indicator constraint value:
//   sum_i gamma^(i-1) * (1[teacher] - b * 1[student])
double constraint_value(const Trajectory& trajectory, double b, double gamma);

// One dual step from the trailing window: lambda' = clamp(lambda +
// eta * excess, 0, cap). Rises when use exceeds the budget, decays toward 0
// when the constraint is strictly met. Requires a non-empty window.
LagrangeState dual_update(const LagrangeState& state, double b);

// Updates the running reward statistics from fresh rollout samples with an
// exponential moving average whose span equals stat_window. No-op when both
// samples are empty or the config is frozen.
RewardConfig update_reward_stats(const RewardConfig& cfg,
                                 std::span<const double> teacher_token_logprobs,
                                 std::span<const double>
                                     student_token_teacher_logprobs);

}  // namespace tandem
