#include "tandem/pcl.hpp"

#include <cmath>
#include <stdexcept>

#include "tandem/train.hpp"

namespace tandem {

namespace {

struct SegmentShape {
  int effective_len = 0;   // e = min(d, steps to terminal)
  bool ends_terminal = false;
};

SegmentShape segment_shape(const Segment& seg, const PCLConfig& cfg) {
  const auto& steps = seg.trajectory->steps;
  if (seg.start < 0 || seg.start >= static_cast<int>(steps.size())) {
    throw std::invalid_argument("segment start outside trajectory");
  }
  int remaining = static_cast<int>(steps.size()) - seg.start;
  int e = std::min(cfg.window_d, remaining);
  bool terminal = steps[seg.start + e - 1].done;
  if (!terminal && seg.start + e >= static_cast<int>(steps.size())) {
    throw std::invalid_argument("segment runs past a non-terminal trajectory end");
  }
  return {e, terminal};
}

double value_at(const ValueTable& value, int instruction_id,
                std::span<const int> window, int step) {
  return value.at(instruction_id, value.codec().index(window), step);
}

}  // namespace

double path_residual(const TabularLM& policy, const ValueTable& value,
                     const Segment& segment, const PCLConfig& cfg) {
  const Trajectory& traj = *segment.trajectory;
  SegmentShape shape = segment_shape(segment, cfg);

  double c = -value_at(value, traj.instruction_id,
                       traj.steps[segment.start].window, segment.start);
  double discount = 1.0;
  for (int j = 0; j < shape.effective_len; ++j) {
    const TrajectoryStep& step = traj.steps[segment.start + j];
    Context ctx{traj.instruction_id, step.window};
    Distribution pi = next_distribution(policy, ctx);
    double p_action = pi[step.action];
    if (p_action <= 0.0) {
      throw std::domain_error(
          "path_residual: action has zero probability under the policy");
    }
    c += discount * (step.reward - cfg.tau * std::log(p_action));
    discount *= cfg.gamma;
  }
  if (!shape.ends_terminal) {
    int end = segment.start + shape.effective_len;
    c += discount *
         value_at(value, traj.instruction_id, traj.steps[end].window, end);
  }
  return c;
}

UpdateStats pcl_update(TabularLM& policy, ValueTable& value,
                       std::span<const Segment> batch, const PCLConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("pcl_update: empty batch");

  std::vector<double> policy_grad(policy.logits.size(), 0.0);
  std::vector<double> value_grad(value.raw().size(), 0.0);
  WindowCodec vcodec = value.codec();
  auto value_index = [&](int instr, std::span<const int> window, int step) {
    int s = std::clamp(step, 0, value.n_steps() - 1);
    return (instr * vcodec.count() + vcodec.index(window)) * value.n_steps() +
           s;
  };

  UpdateStats stats;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Segment& seg : batch) {
    const Trajectory& traj = *seg.trajectory;
    SegmentShape shape = segment_shape(seg, cfg);
    double c = path_residual(policy, value, seg, cfg);
    stats.loss += 0.5 * c * c * inv_n;
    stats.mean_abs_residual += std::abs(c) * inv_n;

    double w = c * inv_n;  // dL/dC for this segment
    value_grad[value_index(traj.instruction_id, traj.steps[seg.start].window,
                           seg.start)] -= w;
    if (!shape.ends_terminal) {
      int end = seg.start + shape.effective_len;
      value_grad[value_index(traj.instruction_id, traj.steps[end].window,
                             end)] += w * std::pow(cfg.gamma, shape.effective_len);
    }

    double discount = 1.0;
    for (int j = 0; j < shape.effective_len; ++j) {
      const TrajectoryStep& step = traj.steps[seg.start + j];
      Context ctx{traj.instruction_id, step.window};
      Distribution pi = next_distribution(policy, ctx);
      std::int64_t row = policy.row_offset(traj.instruction_id, step.window);
      // d(-tau log pi(a))/dz_b = -tau * (1[b=a] - pi_b) on legal columns
      double scale = -w * cfg.tau * discount;
      for (int a = 0; a < policy.n_actions; ++a) {
        if (!policy.action_is_legal(a)) continue;
        double indicator = (a == step.action) ? 1.0 : 0.0;
        policy_grad[row + a] += scale * (indicator - pi[a]);
      }
      discount *= cfg.gamma;
    }
  }

  for (std::size_t i = 0; i < policy.logits.size(); ++i) {
    policy.logits[i] -= cfg.lr_policy * policy_grad[i];
  }
  std::span<double> values = value.raw_mut();
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] -= cfg.lr_value * value_grad[i];
  }
  return stats;
}

void append_segments(const Trajectory& trajectory,
                     std::vector<Segment>& segments) {
  for (int i = 0; i < trajectory.length(); ++i) {
    segments.push_back({&trajectory, i});
  }
}

void ReplayBuffer::push(Trajectory trajectory) {
  items_.push_back(std::move(trajectory));
  while (static_cast<int>(items_.size()) > capacity_) items_.pop_front();
}

const Trajectory& ReplayBuffer::sample() {
  if (items_.empty()) throw std::runtime_error("ReplayBuffer: empty");
  return items_[rng_.next_below(items_.size())];
}

Trajectory annotate_decode(const TabularLM& policy, const EpisodeEnv& env,
                           int instruction_id, std::span<const int> prompt,
                           std::span<const int> x_out,
                           const DecodeTrace& trace, TrajectorySource source) {
  Trajectory traj;
  traj.instruction_id = instruction_id;
  traj.source = source;

  DecodeTrace scored = trace;
  score_trace(*env.teacher, instruction_id, prompt, x_out, scored);

  // Student-observable windows replayed from the augmented input sequence.
  std::vector<int> x_in(prompt.begin(), prompt.end());
  AugAlphabet aug{env.teacher->vocab.size};
  for (std::size_t i = 0; i < scored.steps.size(); ++i) {
    const DecodeStepRecord& rec = scored.steps[i];
    TrajectoryStep step;
    step.window = make_context(policy, instruction_id, x_in).window;
    step.action = rec.action;
    step.origin = rec.origin;
    step.emitted = rec.emitted;
    step.teacher_logprob = rec.teacher_logprob;
    if (env.reward_mode == RewardMode::raw_teacher_logprob) {
      step.reward = rec.teacher_logprob;
    } else {
      if (env.reward_cfg == nullptr) {
        throw std::invalid_argument("shaped rewards need a RewardConfig");
      }
      step.reward = shaped_reward(rec.origin, rec.teacher_logprob, env.lambda,
                                  env.b, *env.reward_cfg);
    }
    step.done = false;
    traj.steps.push_back(std::move(step));

    x_in.push_back(rec.origin == TokenOrigin::teacher_env
                       ? aug.shift(rec.emitted)
                       : rec.emitted);
  }
  if (!traj.steps.empty()) traj.steps.back().done = true;
  return traj;
}

Trajectory collect_episode(const TabularLM& policy, const EpisodeEnv& env,
                           int instruction_id, std::span<const int> prompt,
                           EpisodeMode mode, std::uint64_t seed) {
  if (env.teacher == nullptr) {
    throw std::invalid_argument("collect_episode: env.teacher is null");
  }
  if (mode == EpisodeMode::oracle) {
    return build_oracle_trajectory(policy, *env.teacher, env, instruction_id,
                                   prompt, env.b, seed);
  }
  auto [x_out, trace] = tandem_decode(policy, *env.teacher, instruction_id,
                                      prompt, env.max_len, env.sampling, seed);
  return annotate_decode(policy, env, instruction_id, prompt, x_out, trace,
                         TrajectorySource::on_policy);
}

}  // namespace tandem
