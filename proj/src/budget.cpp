#include "tandem/budget.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tandem {

const std::array<BudgetSpec, 6>& budget_specs() {
  static const std::array<BudgetSpec, 6> specs = {{
      {"no", 0.0},
      {"light", 0.1},
      {"moderate-light", 0.2},
      {"moderate", 0.3},
      {"high", 0.4},
      {"very high", 0.5},
  }};
  return specs;
}

double normalize_reward(const RewardConfig& cfg, double r) {
  return (r - cfg.mu_r) / std::max(cfg.sigma_r, 1e-6);
}

double shaped_reward(TokenOrigin origin, double teacher_logprob, double lambda,
                     double b, const RewardConfig& cfg) {
  if (lambda < 0.0) throw std::invalid_argument("shaped_reward: lambda < 0");
  if (b < 0.0 || b > 1.0) {
    throw std::invalid_argument("shaped_reward: b outside [0, 1]");
  }
  double r = origin == TokenOrigin::student
                 ? normalize_reward(cfg, teacher_logprob) + lambda * b
                 : lambda * (b - 1.0);
  return std::clamp(r, cfg.clip_lo, cfg.clip_hi);
}

double constraint_value(const Trajectory& trajectory, double b, double gamma) {
  double v = 0.0;
  double w = 1.0;
  for (const auto& step : trajectory.steps) {
    v += w * (step.origin == TokenOrigin::teacher_env ? 1.0 : -b);
    w *= gamma;
  }
  return v;
}

LagrangeState dual_update(const LagrangeState& state, double b) {
  if (state.window.empty()) {
    throw std::invalid_argument("dual_update: empty teacher-use window");
  }
  double excess = 0.0;
  for (double f : state.window) {
    excess += state.accounting == ConstraintAccounting::fraction_of_total
                  ? f - b
                  : f - b * (1.0 - f);
  }
  excess /= static_cast<double>(state.window.size());

  LagrangeState next = state;
  next.lambda = std::clamp(state.lambda + state.eta * excess, 0.0, state.cap);
  return next;
}

RewardConfig update_reward_stats(
    const RewardConfig& cfg, std::span<const double> teacher_token_logprobs,
    std::span<const double> student_token_teacher_logprobs) {
  if (cfg.frozen) return cfg;
  if (teacher_token_logprobs.empty() &&
      student_token_teacher_logprobs.empty()) {
    return cfg;
  }
  RewardConfig next = cfg;
  const double alpha = 2.0 / (cfg.stat_window + 1.0);
  for (double lp : teacher_token_logprobs) {
    next.mu_r += alpha * (lp - next.mu_r);
  }
  for (double lp : student_token_teacher_logprobs) {
    double delta = lp - next.student_mean;
    next.student_mean += alpha * delta;
    next.student_var = (1.0 - alpha) * (next.student_var + alpha * delta * delta);
  }
  next.sigma_r = std::max(std::sqrt(next.student_var), 1e-6);
  return next;
}

}  // namespace tandem
