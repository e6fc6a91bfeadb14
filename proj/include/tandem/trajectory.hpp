#pragma once

// Per-step episode records shared by the PCL learner, the budget machinery,
// and the training pipeline.

#include <vector>

namespace tandem {

enum class TokenOrigin {
  student,      // token emitted directly by the policy
  teacher_env,  // token delegated to the teacher via the <call-teacher> action
};

enum class TrajectorySource { on_policy, oracle, replay };

struct TrajectoryStep {
  std::vector<int> window;  // policy-observable window before the action
  int action = 0;           // augmented action id (tau for delegation)
  TokenOrigin origin = TokenOrigin::student;
  int emitted = 0;               // base token appended to the output
  double teacher_logprob = 0.0;  // log p(emitted | teacher context)
  double reward = 0.0;
  bool done = false;
};

struct Trajectory {
  int instruction_id = 0;
  TrajectorySource source = TrajectorySource::on_policy;
  std::vector<TrajectoryStep> steps;

  int length() const { return static_cast<int>(steps.size()); }
  int teacher_token_count() const {
    int n = 0;
    for (const auto& s : steps) n += (s.origin == TokenOrigin::teacher_env);
    return n;
  }
  int student_token_count() const {
    return length() - teacher_token_count();
  }
  double teacher_use_fraction() const {
    return steps.empty() ? 0.0
                         : static_cast<double>(teacher_token_count()) /
                               static_cast<double>(length());
  }
};

}  // namespace tandem
