#pragma once

// Exact machinery for distillation viewed as entropy-regularized value
// optimization: brute-force reverse KL over complete paths, the suffix
// expectation recursion check, soft value iteration producing ground-truth
// (V*, pi*), and exact policy evaluation. All routines enumerate paths over
// the base alphabet and refuse instances beyond a hard path budget.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tandem/models.hpp"

namespace tandem {

struct SoftMDPConfig {
  double tau = 1.0;    // entropy temperature, >= 0
  double gamma = 1.0;  // discount in [0, 1]
  int horizon = 1;     // maximum generated length
  std::int64_t enumeration_budget = 10'000'000;  // complete-path cap
};

struct EnumerationBudgetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense value table over (instruction, window, step). Learned tables use
// n_steps = 1 (step-free); exact finite-horizon tables use horizon + 1
// entries per window. Lookups clamp the step, so a step-free table behaves
// as a stationary value function. Terminal states are handled by callers
// (their value is pinned to 0, never read from the table).
class ValueTable {
 public:
  ValueTable() = default;
  ValueTable(int n_instructions, int n_context_symbols, int order,
             int n_steps);

  double at(int instruction_id, std::int64_t window_index, int step) const;
  double& at_mut(int instruction_id, std::int64_t window_index, int step);

  int n_instructions() const { return n_instructions_; }
  int n_context_symbols() const { return n_context_symbols_; }
  int order() const { return order_; }
  int n_steps() const { return n_steps_; }
  WindowCodec codec() const { return WindowCodec{n_context_symbols_, order_}; }
  std::span<const double> raw() const { return values_; }
  std::span<double> raw_mut() { return values_; }

  void fill(double v);
  std::string dump() const;  // structured text for debugging

 private:
  int n_instructions_ = 0;
  int n_context_symbols_ = 0;
  int order_ = 0;
  int n_steps_ = 1;
  std::int64_t n_windows_ = 0;
  std::vector<double> values_;
};

// Exact reverse KL between complete student paths and the teacher, both
// restricted/renormalized to the base alphabet, absorbing on eos, truncated
// at cfg.horizon. Sums pi(path) * log(pi(path)/p(path)) over every complete
// path reachable from the prompt.
double reverse_kl_exact(const TabularLM& student, const TabularLM& teacher,
                        int instruction_id, std::span<const int> prompt,
                        const SoftMDPConfig& cfg);

// Max over reachable prefix states of the absolute gap between the suffix
// expectation computed by full path enumeration and its one-step expansion.
// Vanishes identically for exact arithmetic; enumeration noise keeps it
// below ~1e-9 at the supported sizes.
double recursion_residual(const TabularLM& student, const TabularLM& teacher,
                          int instruction_id, std::span<const int> prompt,
                          const SoftMDPConfig& cfg);

// Backward induction with the soft backup
//   V*(s, k) = tau * log sum_x exp((log p(x|s) + gamma * V*(s', k+1)) / tau)
// (hard max at tau = 0) over rewards r(s, x) = log p(x|s). Returns the full
// step-indexed V* and the induced Boltzmann-optimal policy at step 0 as a
// tabular model (exactly the optimal policy at every step when tau = 1,
// gamma = 1, where V* vanishes).
std::pair<ValueTable, TabularLM> soft_value_iteration(const TabularLM& teacher,
                                                      const SoftMDPConfig& cfg);

// The step-aware Boltzmann-optimal action distribution induced by a value
// table from soft_value_iteration.
Distribution optimal_policy_distribution(const TabularLM& teacher,
                                         const ValueTable& values,
                                         const SoftMDPConfig& cfg,
                                         const Context& ctx, int step);

// Exact V^pi(prompt): expected discounted sum of log p(x|s) - tau*log pi(x|s)
// under the policy's own base-renormalized distribution. Equals
// -reverse_kl_exact(pi, p, ...) at tau = 1, gamma = 1.
double policy_value(const TabularLM& policy, const TabularLM& teacher,
                    const SoftMDPConfig& cfg, int instruction_id,
                    std::span<const int> prompt);

}  // namespace tandem
