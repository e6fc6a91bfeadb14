#include "tandem/specdec.hpp"

#include <cmath>
#include <stdexcept>

namespace tandem {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::vector<int> lossy_spec_step(const TabularLM& teacher,
                                 const TabularLM& draft, int instruction_id,
                                 std::span<const int> history,
                                 const SpecConfig& cfg, SpecTrace* trace) {
  require(cfg.draft_len >= 1, "lossy_spec_step: draft_len must be >= 1");
  require(cfg.lenience >= 0.0 && cfg.lenience <= 1.0,
          "lossy_spec_step: lenience outside [0, 1]");

  std::vector<int> ctx(history.begin(), history.end());
  SpecCycle cycle;

  // Draft greedily; eos ends the draft early.
  for (int j = 0; j < cfg.draft_len; ++j) {
    Context dctx = make_context(draft, instruction_id, ctx);
    int token = argmax_lowest(next_distribution(draft, dctx));
    cycle.drafted.push_back(token);
    ctx.push_back(token);
    if (token == draft.vocab.eos_id) break;
  }
  cycle.student_passes = static_cast<int>(cycle.drafted.size());

  // One parallel teacher pass covers every drafted position plus the bonus
  // slot: verify, find the first failure.
  std::vector<int> verify_ctx(history.begin(), history.end());
  const int drafted = static_cast<int>(cycle.drafted.size());
  int n = drafted;
  int replacement = -1;
  for (int j = 0; j < drafted; ++j) {
    Context tctx = make_context(teacher, instruction_id, verify_ctx);
    Distribution p = next_distribution(teacher, tctx);
    int teacher_argmax = argmax_lowest(p);
    if (p[cycle.drafted[j]] < cfg.lenience * p[teacher_argmax]) {
      n = j;
      replacement = teacher_argmax;
      break;
    }
    verify_ctx.push_back(cycle.drafted[j]);
  }
  cycle.n_accepted = n;

  std::vector<int> emitted(cycle.drafted.begin(), cycle.drafted.begin() + n);
  if (n < drafted) {
    cycle.correction = replacement;
    emitted.push_back(replacement);
  } else if (drafted == cfg.draft_len) {
    // Full draft accepted: the same verification pass yields the bonus
    // distribution at the extended context.
    Context tctx = make_context(teacher, instruction_id, verify_ctx);
    int bonus = argmax_lowest(next_distribution(teacher, tctx));
    cycle.used_bonus = true;
    cycle.correction = bonus;
    emitted.push_back(bonus);
  }
  // Otherwise the draft ended on eos and was fully accepted: emit as-is.

  cycle.emitted_count = static_cast<int>(emitted.size());
  if (trace != nullptr) trace->cycles.push_back(std::move(cycle));
  return emitted;
}

std::pair<std::vector<int>, SpecTrace> lossy_spec_decode(
    const TabularLM& teacher, const TabularLM& draft, int instruction_id,
    std::span<const int> prompt, int max_len, const SpecConfig& cfg) {
  require(max_len >= 1, "lossy_spec_decode: max_len must be >= 1");
  SpecTrace trace;
  std::vector<int> history(prompt.begin(), prompt.end());
  std::vector<int> out;
  bool done = false;
  while (!done && static_cast<int>(out.size()) < max_len) {
    std::vector<int> emitted =
        lossy_spec_step(teacher, draft, instruction_id, history, cfg, &trace);
    for (int token : emitted) {
      if (static_cast<int>(out.size()) >= max_len) break;  // truncate overshoot
      out.push_back(token);
      history.push_back(token);
      if (token == teacher.vocab.eos_id) {
        done = true;
        break;
      }
    }
    trace.cycles.back().emitted_count =
        std::min(trace.cycles.back().emitted_count,
                 static_cast<int>(out.size()) - trace.total_emitted);
    trace.total_emitted = static_cast<int>(out.size());
  }
  return {std::move(out), std::move(trace)};
}

TabularLM reverse_kl_distill(const TabularLM& draft, const TabularLM& teacher,
                             std::span<const std::vector<int>> prompts,
                             std::span<const int> prompt_instructions,
                             int steps, const DistillMix& mix,
                             const DistillConfig& cfg) {
  require(steps >= 0, "reverse_kl_distill: steps must be >= 0");
  require(prompts.size() == prompt_instructions.size(),
          "reverse_kl_distill: prompts/instructions length mismatch");
  require(mix.student_trajectories || mix.teacher_trajectories,
          "reverse_kl_distill: empty trajectory mix");
  require(!prompts.empty(), "reverse_kl_distill: no prompts");

  TabularLM model = draft;
  const int V = model.vocab.size;
  std::vector<double> grad(model.logits.size());

  // Positions along a rollout contribute the token-wise reverse KL
  //   KL(q || p) over the base alphabet, with gradient
  //   dKL/dz_b = q_b * (log(q_b / p_b) - KL).
  auto accumulate = [&](int instruction, std::span<const int> rollout,
                        std::span<const int> prompt, int& n_positions) {
    std::vector<int> history(prompt.begin(), prompt.end());
    for (int token : rollout) {
      Context dctx = make_context(model, instruction, history);
      Context tctx = make_context(teacher, instruction, history);
      Distribution q = base_distribution(model, dctx);
      Distribution p = next_distribution(teacher, tctx);
      double kl = 0.0;
      for (int x = 0; x < V; ++x) kl += q[x] * (std::log(q[x]) - std::log(p[x]));
      std::int64_t row = model.row_offset(instruction, dctx.window);
      for (int x = 0; x < V; ++x) {
        if (!model.action_is_legal(x)) continue;
        grad[row + x] += q[x] * ((std::log(q[x]) - std::log(p[x])) - kl);
      }
      n_positions += 1;
      history.push_back(token);
    }
  };

  for (int batch = 0; batch < steps; ++batch) {
    Rng rng(derive_seed(cfg.seed, 0xd1, batch));
    std::size_t pick = rng.next_below(prompts.size());
    int instruction = prompt_instructions[pick];
    std::span<const int> prompt{prompts[pick]};

    std::vector<std::vector<int>> rollouts;
    if (mix.student_trajectories) {
      std::vector<int> hist(prompt.begin(), prompt.end());
      std::vector<int> tokens;
      Rng sample_rng(derive_seed(cfg.seed, 0xd2, batch));
      for (int step = 0; step < cfg.max_len; ++step) {
        Context dctx = make_context(model, instruction, hist);
        Distribution q = base_distribution(model, dctx);
        int token = inverse_cdf_sample(q, sample_rng.next_double());
        tokens.push_back(token);
        if (token == model.vocab.eos_id) break;
        hist.push_back(token);
      }
      rollouts.push_back(std::move(tokens));
    }
    if (mix.teacher_trajectories) {
      std::vector<int> hist(prompt.begin(), prompt.end());
      std::vector<int> tokens;
      Rng sample_rng(derive_seed(cfg.seed, 0xd3, batch));
      for (int step = 0; step < cfg.max_len; ++step) {
        Context tctx = make_context(teacher, instruction, hist);
        Distribution p = next_distribution(teacher, tctx);
        int token = inverse_cdf_sample(p, sample_rng.next_double());
        tokens.push_back(token);
        if (token == teacher.vocab.eos_id) break;
        hist.push_back(token);
      }
      rollouts.push_back(std::move(tokens));
    }

    for (int update = 0; update < cfg.updates_per_batch; ++update) {
      std::fill(grad.begin(), grad.end(), 0.0);
      int n_positions = 0;
      for (const auto& rollout : rollouts) {
        accumulate(instruction, rollout, prompt, n_positions);
      }
      if (n_positions == 0) continue;
      double scale = cfg.lr / static_cast<double>(n_positions);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        model.logits[i] -= scale * grad[i];
      }
    }
  }
  return model;
}

}  // namespace tandem
