#include "tandem/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace tandem {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double forward_kl(const Distribution& p, const Distribution& q, int n) {
  double kl = 0.0;
  for (int x = 0; x < n; ++x) {
    kl += p[x] * (std::log(p[x]) - std::log(q[x]));
  }
  return kl;
}

// ceil(l * b) with a guard against products like 10 * 0.3 rounding up.
int budget_position_count(int length, double b) {
  return static_cast<int>(std::ceil(length * b - 1e-9));
}

}  // namespace

TeacherRollout roll_teacher(const TabularLM& teacher, int instruction_id,
                            std::span<const int> prompt, int max_len,
                            SamplingMode sampling, std::uint64_t seed) {
  TeacherRollout out;
  out.instruction_id = instruction_id;
  out.prompt.assign(prompt.begin(), prompt.end());
  Rng rng(seed);
  std::vector<int> history(prompt.begin(), prompt.end());
  for (int step = 0; step < max_len; ++step) {
    Context ctx = make_context(teacher, instruction_id, history);
    Distribution p = next_distribution(teacher, ctx);
    int token = sampling == SamplingMode::greedy
                    ? argmax_lowest(p)
                    : inverse_cdf_sample(p, rng.next_double());
    out.tokens.push_back(token);
    out.logprobs.push_back(std::log(p[token]));
    if (token == teacher.vocab.eos_id) break;
    history.push_back(token);
  }
  return out;
}

bool OracleLabels::contains(int i) const {
  return std::binary_search(positions.begin(), positions.end(), i);
}

OracleLabels kl_rank_labels(const TabularLM& student, const TabularLM& teacher,
                            const TeacherRollout& rollout, double b) {
  require(b >= 0.0 && b <= 1.0, "kl_rank_labels: b outside [0, 1]");
  OracleLabels labels;
  const int l = static_cast<int>(rollout.tokens.size());
  std::vector<int> history(rollout.prompt.begin(), rollout.prompt.end());
  for (int i = 0; i < l; ++i) {
    Context tctx = make_context(teacher, rollout.instruction_id, history);
    Context sctx = make_context(student, rollout.instruction_id, history);
    Distribution p = next_distribution(teacher, tctx);
    Distribution q = base_distribution(student, sctx);
    labels.kl.push_back(forward_kl(p, q, teacher.vocab.size));
    history.push_back(rollout.tokens[i]);
  }

  int take = std::min(budget_position_count(l, b), l);
  std::vector<int> order(l);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int c) { return labels.kl[a] > labels.kl[c]; });
  labels.positions.assign(order.begin(), order.begin() + take);
  std::sort(labels.positions.begin(), labels.positions.end());
  return labels;
}

namespace {

// Walks a teacher rollout with oracle marks applied to the student's input
// view, invoking fn(position, student_ctx, teacher_ctx, in_s_hi, token).
template <typename Fn>
void walk_marked_rollout(const TabularLM& student, const TabularLM& teacher,
                         const TeacherRollout& roll, const OracleLabels& labels,
                         Fn&& fn) {
  AugAlphabet aug{student.vocab.size};
  std::vector<int> x_in(roll.prompt.begin(), roll.prompt.end());
  std::vector<int> x_out(roll.prompt.begin(), roll.prompt.end());
  for (int i = 0; i < static_cast<int>(roll.tokens.size()); ++i) {
    Context sctx = make_context(student, roll.instruction_id, x_in);
    Context tctx = make_context(teacher, roll.instruction_id, x_out);
    bool hi = labels.contains(i);
    fn(i, sctx, tctx, hi, roll.tokens[i]);
    x_in.push_back(hi ? aug.shift(roll.tokens[i]) : roll.tokens[i]);
    x_out.push_back(roll.tokens[i]);
  }
}

}  // namespace

double phase1_loss(const TabularLM& student, const TabularLM& teacher,
                   const TeacherRollout& rollout, const OracleLabels& labels,
                   bool guard_as_printed) {
  if (rollout.tokens.empty()) return 0.0;
  AugAlphabet aug{student.vocab.size};
  double total = 0.0;
  walk_marked_rollout(
      student, teacher, rollout, labels,
      [&](int, const Context& sctx, const Context& tctx, bool hi, int) {
        bool call_case = guard_as_printed ? !hi : hi;
        if (call_case) {
          Distribution pi = next_distribution(student, sctx);
          total += -std::log(pi[aug.tau_id()]);
        } else {
          Distribution p = next_distribution(teacher, tctx);
          Distribution q = base_distribution(student, sctx);
          total += forward_kl(p, q, teacher.vocab.size);
        }
      });
  return total / static_cast<double>(rollout.tokens.size());
}

TabularLM phase1_train(const TabularLM& student, const TabularLM& teacher,
                       const Phase1Config& cfg) {
  require(cfg.batches >= 1, "phase1_train: batches must be >= 1");
  require(teacher.n_instructions % kNumBudgets == 0,
          "phase1_train: teacher lacks the budget-keyword instruction axis");
  TabularLM model = student;
  AugAlphabet aug{model.vocab.size};
  const int n_tasks = teacher.n_instructions / kNumBudgets;

  std::vector<double> grad(model.logits.size());
  for (int batch = 0; batch < cfg.batches; ++batch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    int n_positions = 0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      Rng rng(derive_seed(cfg.seed, batch, k));
      int task = static_cast<int>(rng.next_below(n_tasks));
      int budget_idx = static_cast<int>(rng.next_below(kNumBudgets));
      int instruction = task * kNumBudgets + budget_idx;
      double b = budget_specs()[budget_idx].b;
      std::vector<int> prompt = random_prompt(model.vocab, cfg.prompt_len, rng);
      TeacherRollout roll =
          roll_teacher(teacher, instruction, prompt, cfg.max_len,
                       SamplingMode::seeded, rng.next_u64());
      if (roll.tokens.empty()) continue;
      OracleLabels labels = kl_rank_labels(model, teacher, roll, b);

      walk_marked_rollout(
          model, teacher, roll, labels,
          [&](int, const Context& sctx, const Context& tctx, bool hi, int) {
            std::int64_t row = model.row_offset(instruction, sctx.window);
            bool call_case = cfg.guard_as_printed ? !hi : hi;
            if (call_case) {
              // d(-log pi(tau))/dz = pi - onehot(tau) over legal actions
              Distribution pi = next_distribution(model, sctx);
              for (int a = 0; a < model.n_actions; ++a) {
                if (!model.action_is_legal(a)) continue;
                grad[row + a] += pi[a] - (a == aug.tau_id() ? 1.0 : 0.0);
              }
            } else {
              // dKL(p||q)/dz = q - p over the base columns
              Distribution p = next_distribution(teacher, tctx);
              Distribution q = base_distribution(model, sctx);
              for (int a = 0; a < model.vocab.size; ++a) {
                grad[row + a] += q[a] - p[a];
              }
            }
            n_positions += 1;
          });
    }
    if (n_positions == 0) continue;
    double scale = cfg.lr / static_cast<double>(n_positions);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      model.logits[i] -= scale * grad[i];
    }
  }
  return model;
}

Trajectory build_oracle_trajectory(const TabularLM& student,
                                   const TabularLM& teacher,
                                   const EpisodeEnv& env, int instruction_id,
                                   std::span<const int> prompt, double b,
                                   std::uint64_t seed) {
  TeacherRollout roll = roll_teacher(teacher, instruction_id, prompt,
                                     env.max_len, env.sampling, seed);
  OracleLabels labels = kl_rank_labels(student, teacher, roll, b);

  Trajectory traj;
  traj.instruction_id = instruction_id;
  traj.source = TrajectorySource::oracle;
  AugAlphabet aug{student.vocab.size};
  std::vector<int> x_in(prompt.begin(), prompt.end());
  for (int i = 0; i < static_cast<int>(roll.tokens.size()); ++i) {
    bool hi = labels.contains(i);
    TrajectoryStep step;
    step.window = make_context(student, instruction_id, x_in).window;
    step.action = hi ? aug.tau_id() : roll.tokens[i];
    step.origin = hi ? TokenOrigin::teacher_env : TokenOrigin::student;
    step.emitted = roll.tokens[i];
    step.teacher_logprob = roll.logprobs[i];
    if (env.reward_mode == RewardMode::raw_teacher_logprob) {
      step.reward = roll.logprobs[i];
    } else {
      require(env.reward_cfg != nullptr,
              "build_oracle_trajectory: shaped rewards need a RewardConfig");
      step.reward = shaped_reward(step.origin, roll.logprobs[i], env.lambda, b,
                                  *env.reward_cfg);
    }
    traj.steps.push_back(step);
    x_in.push_back(hi ? aug.shift(roll.tokens[i]) : roll.tokens[i]);
  }
  if (!traj.steps.empty()) traj.steps.back().done = true;
  return traj;
}

namespace {

double window_mean(const std::deque<double>& window) {
  if (window.empty()) return 0.0;
  double s = 0.0;
  for (double f : window) s += f;
  return s / static_cast<double>(window.size());
}

}  // namespace

Phase2Result phase2_train(const TabularLM& student, const TabularLM& teacher,
                          const Phase2Config& cfg) {
  require(cfg.batches >= 1 && cfg.updates_per_batch >= 1,
          "phase2_train: invalid schedule");
  require(teacher.n_instructions % kNumBudgets == 0,
          "phase2_train: teacher lacks the budget-keyword instruction axis");
  const int n_instructions = teacher.n_instructions;

  Phase2Result result;
  result.final_model = student;
  TabularLM& model = result.final_model;
  ValueTable value(model.n_instructions, model.n_context_symbols, model.order,
                   /*n_steps=*/1);

  std::array<LagrangeState, kNumBudgets> lagrange;
  for (auto& ls : lagrange) {
    ls.eta = cfg.lambda_eta;
    ls.cap = cfg.lambda_cap;
    ls.window_capacity = cfg.lambda_window;
    ls.accounting = cfg.accounting;
  }
  RewardConfig reward_cfg;
  reward_cfg.stat_window = cfg.reward_stat_window;

  ReplayBuffer replay(cfg.pcl.replay_capacity,
                      derive_seed(cfg.seed, /*stream=*/0x5e));
  const bool kl_feasible =
      cfg.kl_log_budget > 0 &&
      std::pow(static_cast<double>(model.vocab.size),
               static_cast<double>(cfg.max_len)) <=
          static_cast<double>(cfg.kl_log_budget);

  for (int batch = 0; batch < cfg.batches; ++batch) {
    // Fresh episodes: one on-policy and one oracle per instruction.
    std::vector<Trajectory> fresh;
    std::vector<double> teacher_lps;
    std::vector<double> student_lps;
    for (int instr = 0; instr < n_instructions; ++instr) {
      int budget_idx = instr % kNumBudgets;
      double b = budget_specs()[budget_idx].b;
      EpisodeEnv env;
      env.teacher = &teacher;
      env.max_len = cfg.max_len;
      env.sampling = SamplingMode::seeded;
      env.reward_mode = RewardMode::shaped;
      env.lambda = lagrange[budget_idx].lambda;
      env.b = b;
      env.reward_cfg = &reward_cfg;

      Rng prompt_rng(derive_seed(cfg.seed, 0xa0 + instr, batch));
      std::vector<int> prompt =
          random_prompt(model.vocab, cfg.prompt_len, prompt_rng);

      Trajectory on_policy =
          collect_episode(model, env, instr, prompt, EpisodeMode::on_policy,
                          derive_seed(cfg.seed, 0xb1,
                                      batch * n_instructions + instr));
      Trajectory oracle =
          collect_episode(model, env, instr, prompt, EpisodeMode::oracle,
                          derive_seed(cfg.seed, 0xc2,
                                      batch * n_instructions + instr));

      lagrange[budget_idx].push_fraction(on_policy.teacher_use_fraction());
      for (const auto& step : on_policy.steps) {
        if (step.origin == TokenOrigin::teacher_env) {
          teacher_lps.push_back(step.teacher_logprob);
        } else {
          student_lps.push_back(step.teacher_logprob);
        }
      }
      fresh.push_back(std::move(on_policy));
      fresh.push_back(std::move(oracle));
    }

    reward_cfg = update_reward_stats(reward_cfg, teacher_lps, student_lps);

    // Four updates on fresh + replay thirds; replay redrawn per update.
    double batch_loss = 0.0;
    double batch_residual = 0.0;
    for (int update = 0; update < cfg.updates_per_batch; ++update) {
      std::vector<Trajectory> replay_draw;
      for (int i = 0; i < n_instructions && replay.size() > 0; ++i) {
        replay_draw.push_back(replay.sample());
        replay_draw.back().source = TrajectorySource::replay;
      }
      std::vector<Segment> segments;
      for (const Trajectory& t : fresh) append_segments(t, segments);
      for (const Trajectory& t : replay_draw) append_segments(t, segments);
      if (segments.empty()) continue;
      UpdateStats stats = pcl_update(model, value, segments, cfg.pcl);
      batch_loss = stats.loss;
      batch_residual = stats.mean_abs_residual;
      if (stats.mean_abs_residual > cfg.divergence_guard) {
        throw std::runtime_error(
            "phase2_train diverged at batch " + std::to_string(batch) +
            ": mean |residual| = " + std::to_string(stats.mean_abs_residual));
      }
    }
    for (Trajectory& t : fresh) replay.push(std::move(t));

    // Dual updates from the trailing windows.
    for (int k = 0; k < kNumBudgets; ++k) {
      if (!lagrange[k].window.empty()) {
        lagrange[k] = dual_update(lagrange[k], budget_specs()[k].b);
      }
    }

    TrainLogRow row;
    row.phase = "phase2";
    row.batch = batch;
    row.loss = batch_loss;
    row.mean_abs_residual = batch_residual;
    row.reverse_kl = std::numeric_limits<double>::quiet_NaN();
    if (kl_feasible && (batch % cfg.kl_log_every == 0 ||
                        batch == cfg.batches - 1)) {
      SoftMDPConfig mdp{1.0, 1.0, cfg.max_len, cfg.kl_log_budget};
      double kl = 0.0;
      for (int instr = 0; instr < n_instructions; ++instr) {
        kl += reverse_kl_exact(model, teacher, instr, {}, mdp);
      }
      row.reverse_kl = kl / n_instructions;
    }
    for (int k = 0; k < kNumBudgets; ++k) {
      row.teacher_use[k] = window_mean(lagrange[k].window);
      row.lambda[k] = lagrange[k].lambda;
    }
    result.log.push_back(row);

    if ((batch + 1) % cfg.checkpoint_every == 0 || batch == cfg.batches - 1) {
      Checkpoint ck;
      ck.batch = batch + 1;
      ck.model = model;
      ck.window_use = row.teacher_use;
      ck.lambda = row.lambda;
      result.checkpoints.push_back(std::move(ck));
    }
  }
  return result;
}

namespace {

struct EvalOutcome {
  std::array<double, kNumBudgets> use{};
  double quality = 0.0;
};

EvalOutcome evaluate_model(const TabularLM& model, const TabularLM& teacher,
                           const CheckpointSelector& sel) {
  const int n_tasks = teacher.n_instructions / kNumBudgets;
  EvalOutcome out;
  double quality_sum = 0.0;
  int quality_count = 0;
  for (int k = 0; k < kNumBudgets; ++k) {
    std::int64_t calls = 0;
    std::int64_t tokens = 0;
    for (int i = 0; i < sel.validation_prompts; ++i) {
      Rng prompt_rng(derive_seed(sel.seed, 0x77, i));
      std::vector<int> prompt =
          random_prompt(teacher.vocab, sel.prompt_len, prompt_rng);
      int task = i % n_tasks;
      int instruction = task * kNumBudgets + k;
      auto [x_out, trace] = tandem_decode(model, teacher, instruction, prompt,
                                          sel.max_len, sel.sampling,
                                          derive_seed(sel.seed, 0x78, i));
      calls += trace.teacher_calls;
      tokens += static_cast<std::int64_t>(x_out.size());
      if (!x_out.empty()) {
        Context prompt_ctx = make_context(teacher, instruction, prompt);
        quality_sum +=
            sequence_logprob(teacher, prompt_ctx, x_out) / x_out.size();
        quality_count += 1;
      }
    }
    out.use[k] = tokens == 0 ? 0.0
                             : static_cast<double>(calls) /
                                   static_cast<double>(tokens);
  }
  out.quality = quality_count == 0 ? 0.0 : quality_sum / quality_count;
  return out;
}

}  // namespace

SelectionResult select_checkpoint(std::span<const Checkpoint> checkpoints,
                                  const TabularLM& teacher,
                                  const CheckpointSelector& selector) {
  require(!checkpoints.empty(), "select_checkpoint: no checkpoints");
  SelectionResult best_ok;
  SelectionResult best_fallback;
  double best_quality = -std::numeric_limits<double>::infinity();
  double least_violation = std::numeric_limits<double>::infinity();

  for (int i = 0; i < static_cast<int>(checkpoints.size()); ++i) {
    EvalOutcome ev = evaluate_model(checkpoints[i].model, teacher, selector);
    double worst = 0.0;
    for (int k = 0; k < kNumBudgets; ++k) {
      worst = std::max(worst, std::abs(ev.use[k] - budget_specs()[k].b));
    }
    if (worst <= selector.delta && ev.quality > best_quality) {
      best_quality = ev.quality;
      best_ok = {i, false, worst, ev.use, ev.quality};
    }
    if (worst < least_violation) {
      least_violation = worst;
      best_fallback = {i, true, worst, ev.use, ev.quality};
    }
  }
  return best_ok.index >= 0 ? best_ok : best_fallback;
}

}  // namespace tandem
