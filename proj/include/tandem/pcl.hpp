#pragma once

// Path Consistency Learning over tabular policy and value tables. A segment
// residual compares the value gap across d steps against the discounted sum
// of rewards minus the entropy penalty; the learner descends the mean
// squared residual with analytic gradients through both tables.

#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "tandem/budget.hpp"
#include "tandem/decode.hpp"
#include "tandem/kd_mdp.hpp"
#include "tandem/models.hpp"
#include "tandem/trajectory.hpp"

namespace tandem {

struct PCLConfig {
  double tau = 1.0;
  double gamma = 1.0;
  int window_d = 1;          // consistency segment length
  double lr_policy = 1e-2;
  double lr_value = 1e-3;
  int batch_size = 16;
  int replay_capacity = 512;
  int updates_per_batch = 4;
};

// A consistency segment: steps [start, start + window_d) of one trajectory,
// truncated at the terminal step.
struct Segment {
  const Trajectory* trajectory = nullptr;
  int start = 0;
};

// The scalar consistency residual
//   C = -V(s_i) + gamma^e V(s_{i+e})
//       + sum_{j<e} gamma^j (r_{i+j} - tau * log pi(a_{i+j} | s_{i+j}))
// with e = min(d, steps to terminal) and V pinned to 0 at terminal states.
// Zero on every segment of every trajectory at the soft-optimal pair.
double path_residual(const TabularLM& policy, const ValueTable& value,
                     const Segment& segment, const PCLConfig& cfg);

struct UpdateStats {
  double loss = 0.0;               // pre-update mean of C^2 / 2
  double mean_abs_residual = 0.0;  // pre-update mean |C|
};

// One gradient step on L = mean(C^2) / 2 over the batch, in place. Policy
// logits move only on legal-action columns; value entries move at segment
// endpoints. Returns pre-update statistics.
UpdateStats pcl_update(TabularLM& policy, ValueTable& value,
                       std::span<const Segment> batch, const PCLConfig& cfg);

// All segments of a trajectory (one per step).
void append_segments(const Trajectory& trajectory,
                     std::vector<Segment>& segments);

// FIFO ring of trajectories with seeded uniform sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity, std::uint64_t seed)
      : capacity_(capacity), rng_(seed) {}

  void push(Trajectory trajectory);
  const Trajectory& sample();
  int size() const { return static_cast<int>(items_.size()); }
  int capacity() const { return capacity_; }

 private:
  int capacity_;
  Rng rng_;
  std::deque<Trajectory> items_;
};

enum class EpisodeMode { on_policy, oracle };
enum class RewardMode {
  raw_teacher_logprob,  // unconstrained distillation: r = log p(token)
  shaped,               // budgeted reward with normalization and clipping
};

struct EpisodeEnv {
  const TabularLM* teacher = nullptr;
  int max_len = 16;
  SamplingMode sampling = SamplingMode::seeded;
  RewardMode reward_mode = RewardMode::raw_teacher_logprob;
  double lambda = 0.0;
  double b = 0.0;
  const RewardConfig* reward_cfg = nullptr;  // required in shaped mode
};

// Collects one episode. on_policy samples the policy through the tandem
// protocol; oracle replays the teacher-forced oracle construction from the
// training pipeline. Rewards are filled per the env's reward mode.
// Reproducible from the seed.
Trajectory collect_episode(const TabularLM& policy, const EpisodeEnv& env,
                           int instruction_id, std::span<const int> prompt,
                           EpisodeMode mode, std::uint64_t seed);

// Builds trajectory step records (windows, rewards, scoring) from a finished
// tandem decode. Shared by collect_episode and the oracle constructor.
Trajectory annotate_decode(const TabularLM& policy, const EpisodeEnv& env,
                           int instruction_id, std::span<const int> prompt,
                           std::span<const int> x_out,
                           const DecodeTrace& trace, TrajectorySource source);

}  // namespace tandem
