#include "tandem/decode.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tandem {

DecodeState make_decode_state(int instruction_id,
                              std::span<const int> prompt) {
  DecodeState state;
  state.instruction_id = instruction_id;
  state.x_in.assign(prompt.begin(), prompt.end());
  state.x_out.assign(prompt.begin(), prompt.end());
  state.prompt_len = static_cast<int>(prompt.size());
  return state;
}

TandemStepResult tandem_step(const TabularLM& student,
                             const TabularLM& teacher, DecodeState& state,
                             SamplingMode sampling, Rng& rng,
                             DecodeTrace* trace) {
  if (state.terminated) {
    throw std::invalid_argument("tandem_step: state already terminated");
  }
  AugAlphabet aug{teacher.vocab.size};

  Context sctx = make_context(student, state.instruction_id, state.x_in);
  Distribution pi = next_distribution(student, sctx);
  int action = sampling == SamplingMode::greedy
                   ? argmax_lowest(pi)
                   : inverse_cdf_sample(pi, rng.next_double());

  TandemStepResult result;
  double teacher_logprob = std::numeric_limits<double>::quiet_NaN();
  if (action == aug.tau_id()) {
    Context tctx = make_context(teacher, state.instruction_id, state.x_out);
    Distribution p = next_distribution(teacher, tctx);
    if (trace != nullptr) trace->teacher_distribution_evals += 1;
    int token = sampling == SamplingMode::greedy
                    ? argmax_lowest(p)
                    : inverse_cdf_sample(p, rng.next_double());
    state.x_in.push_back(aug.shift(token));
    state.x_out.push_back(token);
    result = {token, TokenOrigin::teacher_env};
    teacher_logprob = std::log(p[token]);
  } else {
    state.x_in.push_back(action);
    state.x_out.push_back(action);
    result = {action, TokenOrigin::student};
  }

  if (result.emitted == teacher.vocab.eos_id) state.terminated = true;
  if (trace != nullptr) {
    trace->steps.push_back(
        {result.origin, action, result.emitted, teacher_logprob});
    if (result.origin == TokenOrigin::teacher_env) {
      trace->teacher_calls += 1;
    } else {
      trace->student_tokens += 1;
    }
  }
  return result;
}

std::pair<std::vector<int>, DecodeTrace> tandem_decode(
    const TabularLM& student, const TabularLM& teacher, int instruction_id,
    std::span<const int> prompt, int max_len, SamplingMode sampling,
    std::uint64_t seed) {
  if (max_len < 1) throw std::invalid_argument("tandem_decode: max_len < 1");
  DecodeState state = make_decode_state(instruction_id, prompt);
  DecodeTrace trace;
  Rng rng(seed);
  while (!state.terminated && state.emitted_count() < max_len) {
    tandem_step(student, teacher, state, sampling, rng, &trace);
  }
  std::vector<int> emitted(state.x_out.begin() + state.prompt_len,
                           state.x_out.end());
  return {std::move(emitted), std::move(trace)};
}

void score_trace(const TabularLM& teacher, int instruction_id,
                 std::span<const int> prompt, std::span<const int> x_out,
                 DecodeTrace& trace) {
  if (x_out.size() != trace.steps.size()) {
    throw std::invalid_argument("score_trace: output/trace length mismatch");
  }
  std::vector<int> history(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    if (std::isnan(trace.steps[i].teacher_logprob)) {
      Context tctx = make_context(teacher, instruction_id, history);
      Distribution p = next_distribution(teacher, tctx);
      trace.steps[i].teacher_logprob = std::log(p[x_out[i]]);
    }
    history.push_back(x_out[i]);
  }
}

}  // namespace tandem
