#pragma once

// Two-phase training: behavior cloning against the KL-rank oracle policy,
// then constrained PCL fine-tuning with per-budget Lagrange multipliers,
// trailing-window dual updates, checkpointing, and checkpoint selection.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/budget.hpp"
#include "tandem/models.hpp"
#include "tandem/pcl.hpp"
#include "tandem/trajectory.hpp"

namespace tandem {

// A teacher-forced rollout: the substrate for KL ranking and oracle
// trajectories.
struct TeacherRollout {
  int instruction_id = 0;
  std::vector<int> prompt;
  std::vector<int> tokens;
  std::vector<double> logprobs;  // log p(token | context) per position
};

TeacherRollout roll_teacher(const TabularLM& teacher, int instruction_id,
                            std::span<const int> prompt, int max_len,
                            SamplingMode sampling, std::uint64_t seed);

struct OracleLabels {
  std::vector<int> positions;  // S_hi, ascending
  std::vector<double> kl;      // per-position KL(p || student renormalized)

  bool contains(int i) const;
};

// Ranks rollout positions by teacher-to-student KL (student renormalized to
// the base alphabet, history unmarked) and selects the top ceil(l * b)
// positions, ties broken toward the lowest index.
OracleLabels kl_rank_labels(const TabularLM& student, const TabularLM& teacher,
                            const TeacherRollout& rollout, double b);

// Behavior-cloning loss along the oracle-marked history: selected positions
// contribute -log pi(<call-teacher>); the rest contribute the forward KL of
// the teacher onto the base-renormalized student. Mean over positions.
// `guard_as_printed` swaps the two cases for comparison runs.
double phase1_loss(const TabularLM& student, const TabularLM& teacher,
                   const TeacherRollout& rollout, const OracleLabels& labels,
                   bool guard_as_printed = false);

struct Phase1Config {
  int batches = 200;
  int batch_size = 16;
  double lr = 0.5;
  int max_len = 12;
  int prompt_len = 2;
  bool guard_as_printed = false;
  std::uint64_t seed = 1;
};

// Gradient descent on phase1_loss over teacher-forced rollouts with budgets
// drawn uniformly from the six specs. Pure in (student, teacher, cfg).
TabularLM phase1_train(const TabularLM& student, const TabularLM& teacher,
                       const Phase1Config& cfg);

// Oracle trajectory: teacher rollout with <call-teacher> actions at the
// S_hi positions (tokens entering the student view shifted) and the
// remaining teacher tokens recorded as student actions. Rewards follow the
// env's reward mode.
Trajectory build_oracle_trajectory(const TabularLM& student,
                                   const TabularLM& teacher,
                                   const EpisodeEnv& env, int instruction_id,
                                   std::span<const int> prompt, double b,
                                   std::uint64_t seed);

struct Phase2Config {
  int batches = 5000;
  int updates_per_batch = 4;
  int checkpoint_every = 500;
  PCLConfig pcl;
  int max_len = 12;
  int prompt_len = 2;
  double lambda_eta = 1e-2;
  double lambda_cap = 2.0;
  int lambda_window = 50;
  ConstraintAccounting accounting = ConstraintAccounting::fraction_of_total;
  int reward_stat_window = 100;
  double divergence_guard = 1e3;  // abort when mean |C| exceeds this
  // Enumeration cap for the optional exact-KL log column; 0 disables.
  std::int64_t kl_log_budget = 100000;
  int kl_log_every = 50;
  std::uint64_t seed = 2;
};

struct TrainLogRow {
  std::string phase;
  int batch = 0;
  double loss = 0.0;
  double mean_abs_residual = 0.0;
  double reverse_kl = 0.0;  // NaN when enumeration is not feasible
  std::array<double, kNumBudgets> teacher_use{};  // trailing-window means
  std::array<double, kNumBudgets> lambda{};
};

struct Checkpoint {
  int batch = 0;
  TabularLM model;
  std::array<double, kNumBudgets> window_use{};
  std::array<double, kNumBudgets> lambda{};
};

struct Phase2Result {
  TabularLM final_model;
  std::vector<Checkpoint> checkpoints;
  std::vector<TrainLogRow> log;
};

// Per batch: one on-policy and one oracle episode per instruction, replay
// mixing in equal thirds, updates_per_batch PCL steps, then one dual update
// per budget from its trailing window. The teacher must carry the full
// (task x budget-keyword) instruction axis.
Phase2Result phase2_train(const TabularLM& student, const TabularLM& teacher,
                          const Phase2Config& cfg);

struct CheckpointSelector {
  double delta = 0.05;  // teacher-use tolerance per budget
  int validation_prompts = 512;
  int prompt_len = 2;
  int max_len = 12;
  SamplingMode sampling = SamplingMode::seeded;
  std::uint64_t seed = 3;
};

struct SelectionResult {
  int index = -1;
  bool flagged = false;  // no checkpoint satisfied every budget
  double worst_violation = 0.0;
  std::array<double, kNumBudgets> measured_use{};
  double quality = 0.0;  // mean per-token teacher log-likelihood
};

// Filters checkpoints to those within delta of every budget on the
// validation prompts, then maximizes quality; falls back to the minimal
// worst-violation checkpoint (flagged) when none qualify.
SelectionResult select_checkpoint(std::span<const Checkpoint> checkpoints,
                                  const TabularLM& teacher,
                                  const CheckpointSelector& selector);

}  // namespace tandem
