#pragma once

// Experiment driver: synthetic task suites, quality and modeled-cost
// metrics, budget and lenience sweeps, CSV reporting, and the CLI entry
// point. Every run is bit-reproducible from (config, seed).

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/budget.hpp"
#include "tandem/decode.hpp"
#include "tandem/models.hpp"
#include "tandem/specdec.hpp"
#include "tandem/train.hpp"

namespace tandem {

struct TaskSuite {
  std::uint64_t seed = 1;
  Vocab vocab{6, 0};
  int n_tasks = 1;
  struct TeacherSpec {
    std::uint64_t seed = 7;
    int order = 2;
    double concentration = 4.0;
  } teacher;
  struct StudentSpec {
    int order = 1;
    double smoothing = 0.02;
  } student;
  int prompt_count = 512;
  int prompt_len = 2;
  int max_len = 12;
  SamplingMode eval_sampling = SamplingMode::seeded;

  int n_instructions() const { return n_tasks * kNumBudgets; }
};

struct CostModel {
  double c_s = 1.0;   // one student forward pass
  double c_t = 10.0;  // one teacher forward pass
};

struct SweepConfig {
  std::vector<int> draft_lens{3, 5, 10};
  int lenience_steps = 11;  // 0.0 .. 1.0 in steps of 0.1
  CostModel cost_model;
};

struct GkdConfig {
  int batches = 5200;
  int updates_per_batch = 4;
  double lr = 0.5;
  int n_train_prompts = 64;
  std::uint64_t seed = 4;
};

// The whole config document consumed by the CLI.
struct Config {
  TaskSuite suite;
  Phase1Config phase1;
  Phase2Config phase2;
  GkdConfig gkd;
  CheckpointSelector selector;
  SweepConfig sweep;
};

Config default_config(std::uint64_t seed);

// Teacher over the full (task x budget-keyword) instruction axis: task
// tables drawn from the suite's teacher spec, replicated across keywords so
// the teacher is blind to the budget component.
TabularLM build_teacher(const TaskSuite& suite);

struct PromptCase {
  int task = 0;
  std::vector<int> tokens;
  std::uint64_t decode_seed = 0;  // shared across methods and budgets
};

// Evaluation prompt prefixes, reproducible from the suite seed.
std::vector<PromptCase> make_eval_prompts(const TaskSuite& suite);

struct RunReport {
  std::string method;       // "tandem" | "specdec" | "teacher"
  double param = 0.0;       // budget b or lenience l
  int draft_len = 0;        // 0 for non-specdec rows
  double quality_nats_per_token = 0.0;
  double teacher_use_fraction = 0.0;
  double cost_per_token = 0.0;
  int n_prompts = 0;
  std::uint64_t seed = 0;
};

struct QualityResult {
  double mean_logprob_per_token = 0.0;
  int excluded_empty = 0;
};

// Mean over outputs of sequence_logprob(teacher, prompt, output) / |output|;
// empty outputs are excluded and counted.
QualityResult quality_metric(const TabularLM& teacher,
                             std::span<const PromptCase> prompts,
                             std::span<const int> instruction_ids,
                             std::span<const std::vector<int>> outputs);

// Tandem cost: every emitted token costs one student pass and every teacher
// call adds one teacher pass.
double modeled_cost(const DecodeTrace& trace, const CostModel& cm);
// Speculative cost: each cycle costs its drafted student passes plus one
// parallel teacher pass.
double modeled_cost(const SpecTrace& trace, const CostModel& cm);

// Per-step trace rows for the verbose sweep output.
struct TraceRow {
  std::string method;
  double param = 0.0;
  int draft_len = 0;
  int prompt_idx = 0;
  int step = 0;
  std::string origin;
  int token = 0;
  double teacher_logprob = 0.0;
};

// Evaluates tandem at the six budgets, lossy speculative decoding at the
// lenience grid for each draft length, and the pure-teacher greedy
// reference, all on the same prompts with shared seeds.
std::vector<RunReport> run_sweep(const Config& config,
                                 const TabularLM& teacher,
                                 const TabularLM& student,
                                 const TabularLM& draft,
                                 std::vector<TraceRow>* trace_rows = nullptr);

// CLI with subcommands gen-task, train, eval, sweep, oracle-check.
int cli_entry(int argc, const char* const* argv);

}  // namespace tandem
