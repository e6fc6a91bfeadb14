#pragma once

// Student-teacher tandem decoding. The student samples over the base
// alphabet plus the <call-teacher> action; on a call the teacher samples one
// token which is emitted verbatim and enters the student's input sequence
// shifted by the base alphabet size. The teacher is queried only on calls,
// and the trace audits that query count exactly.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tandem/models.hpp"
#include "tandem/rng.hpp"
#include "tandem/trajectory.hpp"

namespace tandem {

enum class SamplingMode { greedy, seeded };

struct DecodeState {
  int instruction_id = 0;
  std::vector<int> x_in;   // augmented input ids (prompt entries unshifted)
  std::vector<int> x_out;  // emitted base tokens
  int prompt_len = 0;
  bool terminated = false;

  int emitted_count() const {
    return static_cast<int>(x_out.size()) - prompt_len;
  }
};

struct DecodeStepRecord {
  TokenOrigin origin = TokenOrigin::student;
  int action = 0;   // augmented action id the student took
  int emitted = 0;  // base token appended to x_out
  // log p(emitted | teacher context); NaN for student-origin steps until a
  // scoring pass fills it (scoring is not part of the decode protocol).
  double teacher_logprob = 0.0;
};

struct DecodeTrace {
  std::vector<DecodeStepRecord> steps;
  int teacher_calls = 0;
  int student_tokens = 0;
  // Incremented at the protocol's only teacher query site; equals
  // teacher_calls on every decode.
  int teacher_distribution_evals = 0;

  double teacher_use_fraction() const {
    int total = teacher_calls + student_tokens;
    return total == 0 ? 0.0 : static_cast<double>(teacher_calls) / total;
  }
};

DecodeState make_decode_state(int instruction_id, std::span<const int> prompt);

struct TandemStepResult {
  int emitted = 0;
  TokenOrigin origin = TokenOrigin::student;
};

// One decoding step. Greedy mode breaks argmax ties toward the lowest token
// index (for both models); seeded mode draws from `rng`, teacher after
// student when a call happens.
TandemStepResult tandem_step(const TabularLM& student, const TabularLM& teacher,
                             DecodeState& state, SamplingMode sampling,
                             Rng& rng, DecodeTrace* trace);

// Full decode: steps until eos is emitted or max_len tokens are out.
std::pair<std::vector<int>, DecodeTrace> tandem_decode(
    const TabularLM& student, const TabularLM& teacher, int instruction_id,
    std::span<const int> prompt, int max_len, SamplingMode sampling,
    std::uint64_t seed);

// Fills teacher_logprob on student-origin steps by rescoring x_out under the
// teacher. Separate from the decode loop so protocol query accounting stays
// honest.
void score_trace(const TabularLM& teacher, int instruction_id,
                 std::span<const int> prompt, std::span<const int> x_out,
                 DecodeTrace& trace);

}  // namespace tandem
