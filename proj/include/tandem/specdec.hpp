#pragma once

// Lossy greedy speculative decoding and the reverse-KL trajectory
// distillation that prepares its draft model. One verification cycle drafts
// up to K greedy tokens from the draft model, checks them against the
// teacher's probabilities under the lenience-relaxed test
//   accept iff p(draft) >= lenience * p(teacher argmax)
// and emits the accepted prefix plus either the teacher's replacement token
// or, on full acceptance, the teacher's bonus token.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tandem/decode.hpp"
#include "tandem/models.hpp"

namespace tandem {

struct SpecConfig {
  int draft_len = 5;      // K >= 1
  double lenience = 1.0;  // in [0, 1]
};

struct SpecCycle {
  std::vector<int> drafted;
  int n_accepted = 0;      // accepted prefix length
  bool used_bonus = false; // full acceptance of a K-length draft
  int correction = -1;     // replacement or bonus token, -1 if none
  int emitted_count = 0;   // tokens appended this cycle (post-truncation)
  int student_passes = 0;  // drafted count
  int teacher_passes = 1;  // one parallel verification pass per cycle
};

struct SpecTrace {
  std::vector<SpecCycle> cycles;
  int total_emitted = 0;

  int teacher_passes() const {
    return static_cast<int>(cycles.size());
  }
  int student_passes() const {
    int n = 0;
    for (const auto& c : cycles) n += c.student_passes;
    return n;
  }
};

// One cycle from `history` (prompt plus emitted so far). Greedy everywhere,
// ties broken toward the lowest token index.
std::vector<int> lossy_spec_step(const TabularLM& teacher,
                                 const TabularLM& draft, int instruction_id,
                                 std::span<const int> history,
                                 const SpecConfig& cfg, SpecTrace* trace);

// Cycles until eos or max_len; overshoot past max_len is truncated.
std::pair<std::vector<int>, SpecTrace> lossy_spec_decode(
    const TabularLM& teacher, const TabularLM& draft, int instruction_id,
    std::span<const int> prompt, int max_len, const SpecConfig& cfg);

struct DistillMix {
  bool student_trajectories = true;
  bool teacher_trajectories = true;
};

struct DistillConfig {
  double lr = 0.5;
  int updates_per_batch = 4;
  int max_len = 12;
  std::uint64_t seed = 4;
};

// Token-wise reverse KL distillation over trajectories sampled from the
// draft and/or the teacher. The draft stays on the base alphabet. Zero steps
// returns the input unchanged.
TabularLM reverse_kl_distill(const TabularLM& draft, const TabularLM& teacher,
                             std::span<const std::vector<int>> prompts,
                             std::span<const int> prompt_instructions,
                             int steps, const DistillMix& mix,
                             const DistillConfig& cfg);

}  // namespace tandem
