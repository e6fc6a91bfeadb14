#include "tandem/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <stdexcept>

#include "CLI11.hpp"

#include "tandem/io.hpp"
#include "tandem/oracle_suite.hpp"

namespace tandem {

Config default_config(std::uint64_t seed) {
  Config c;
  c.suite.seed = seed;
  c.suite.teacher.seed = derive_seed(seed, 0x01);
  c.phase1.seed = derive_seed(seed, 0x02);
  c.phase1.max_len = c.suite.max_len;
  c.phase1.prompt_len = c.suite.prompt_len;
  c.phase2.seed = derive_seed(seed, 0x03);
  c.phase2.max_len = c.suite.max_len;
  c.phase2.prompt_len = c.suite.prompt_len;
  c.phase2.pcl.tau = 0.3;
  c.phase2.pcl.lr_policy = 1e-2;
  c.phase2.pcl.lr_value = 1e-3;
  c.gkd.seed = derive_seed(seed, 0x04);
  c.selector.seed = derive_seed(seed, 0x05);
  c.selector.max_len = c.suite.max_len;
  c.selector.prompt_len = c.suite.prompt_len;
  c.selector.sampling = c.suite.eval_sampling;
  return c;
}

TabularLM build_teacher(const TaskSuite& suite) {
  TabularLM base = random_teacher(suite.teacher.seed, suite.teacher.order,
                                  suite.vocab, suite.teacher.concentration,
                                  suite.n_tasks);
  return replicate_instructions(base, kNumBudgets);
}

std::vector<PromptCase> make_eval_prompts(const TaskSuite& suite) {
  std::vector<PromptCase> prompts;
  prompts.reserve(suite.prompt_count);
  for (int i = 0; i < suite.prompt_count; ++i) {
    PromptCase pc;
    pc.task = i % suite.n_tasks;
    Rng rng(derive_seed(suite.seed, 0x11, i));
    pc.tokens = random_prompt(suite.vocab, suite.prompt_len, rng);
    pc.decode_seed = derive_seed(suite.seed, 0x12, i);
    prompts.push_back(std::move(pc));
  }
  return prompts;
}

QualityResult quality_metric(const TabularLM& teacher,
                             std::span<const PromptCase> prompts,
                             std::span<const int> instruction_ids,
                             std::span<const std::vector<int>> outputs) {
  if (prompts.size() != outputs.size() ||
      prompts.size() != instruction_ids.size()) {
    throw std::invalid_argument("quality_metric: misaligned inputs");
  }
  QualityResult result;
  double sum = 0.0;
  int counted = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (outputs[i].empty()) {
      result.excluded_empty += 1;
      continue;
    }
    Context prompt_ctx =
        make_context(teacher, instruction_ids[i], prompts[i].tokens);
    sum += sequence_logprob(teacher, prompt_ctx, outputs[i]) /
           static_cast<double>(outputs[i].size());
    counted += 1;
  }
  result.mean_logprob_per_token = counted == 0 ? 0.0 : sum / counted;
  return result;
}

double modeled_cost(const DecodeTrace& trace, const CostModel& cm) {
  int emitted = trace.teacher_calls + trace.student_tokens;
  if (emitted == 0) throw std::invalid_argument("modeled_cost: empty trace");
  return (emitted * cm.c_s + trace.teacher_calls * cm.c_t) / emitted;
}

double modeled_cost(const SpecTrace& trace, const CostModel& cm) {
  if (trace.total_emitted == 0) {
    throw std::invalid_argument("modeled_cost: empty trace");
  }
  double total = 0.0;
  for (const SpecCycle& c : trace.cycles) {
    total += c.student_passes * cm.c_s + c.teacher_passes * cm.c_t;
  }
  return total / trace.total_emitted;
}

namespace {

void append_decode_traces(std::vector<TraceRow>* rows, const std::string& method,
                          double param, int draft_len, int prompt_idx,
                          const DecodeTrace& trace) {
  if (rows == nullptr) return;
  for (std::size_t s = 0; s < trace.steps.size(); ++s) {
    const DecodeStepRecord& rec = trace.steps[s];
    rows->push_back({method, param, draft_len, prompt_idx,
                     static_cast<int>(s),
                     rec.origin == TokenOrigin::teacher_env ? "teacher"
                                                            : "student",
                     rec.emitted, rec.teacher_logprob});
  }
}

struct SweepAccumulator {
  std::vector<std::vector<int>> outputs;
  std::vector<int> instruction_ids;
  std::int64_t teacher_units = 0;  // calls (tandem) or cycles (specdec)
  std::int64_t emitted = 0;
  double cost_total = 0.0;
};

}  // namespace

std::vector<RunReport> run_sweep(const Config& config,
                                 const TabularLM& teacher,
                                 const TabularLM& student,
                                 const TabularLM& draft,
                                 std::vector<TraceRow>* trace_rows) {
  const TaskSuite& suite = config.suite;
  const CostModel& cm = config.sweep.cost_model;
  std::vector<PromptCase> prompts = make_eval_prompts(suite);
  std::vector<RunReport> rows;

  // Tandem rows, one per budget.
  for (int k = 0; k < kNumBudgets; ++k) {
    SweepAccumulator acc;
    for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
      int instruction = prompts[i].task * kNumBudgets + k;
      auto [x_out, trace] =
          tandem_decode(student, teacher, instruction, prompts[i].tokens,
                        suite.max_len, suite.eval_sampling,
                        prompts[i].decode_seed);
      acc.teacher_units += trace.teacher_calls;
      acc.emitted += static_cast<std::int64_t>(x_out.size());
      acc.cost_total += x_out.size() * cm.c_s + trace.teacher_calls * cm.c_t;
      if (trace_rows != nullptr) {
        score_trace(teacher, instruction, prompts[i].tokens, x_out, trace);
        append_decode_traces(trace_rows, "tandem", budget_specs()[k].b, 0, i,
                             trace);
      }
      acc.instruction_ids.push_back(instruction);
      acc.outputs.push_back(std::move(x_out));
    }
    QualityResult q =
        quality_metric(teacher, prompts, acc.instruction_ids, acc.outputs);
    rows.push_back({"tandem", budget_specs()[k].b, 0,
                    q.mean_logprob_per_token,
                    static_cast<double>(acc.teacher_units) / acc.emitted,
                    acc.cost_total / acc.emitted,
                    static_cast<int>(prompts.size()), suite.seed});
  }

  // Speculative rows: draft lengths x lenience grid, greedy.
  for (int K : config.sweep.draft_lens) {
    for (int li = 0; li < config.sweep.lenience_steps; ++li) {
      double lenience = config.sweep.lenience_steps == 1
                            ? 0.0
                            : static_cast<double>(li) /
                                  (config.sweep.lenience_steps - 1);
      SpecConfig spec_cfg{K, lenience};
      SweepAccumulator acc;
      for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
        int instruction = prompts[i].task * kNumBudgets;  // canonical keyword
        auto [x_out, trace] =
            lossy_spec_decode(teacher, draft, instruction, prompts[i].tokens,
                              suite.max_len, spec_cfg);
        acc.teacher_units += trace.teacher_passes();
        acc.emitted += static_cast<std::int64_t>(x_out.size());
        for (const SpecCycle& cyc : trace.cycles) {
          acc.cost_total += cyc.student_passes * cm.c_s + cm.c_t;
        }
        if (trace_rows != nullptr) {
          // Unified per-token trace: accepted drafts are student tokens,
          // corrections and bonuses are teacher tokens.
          std::vector<int> history(prompts[i].tokens.begin(),
                                   prompts[i].tokens.end());
          int step = 0;
          for (const SpecCycle& cyc : trace.cycles) {
            for (int j = 0; j < cyc.emitted_count; ++j) {
              bool from_teacher = j == cyc.n_accepted && cyc.correction >= 0;
              int token = static_cast<std::size_t>(step) < x_out.size()
                              ? x_out[step]
                              : -1;
              if (token < 0) break;
              Context tctx = make_context(teacher, instruction, history);
              double lp = std::log(next_distribution(teacher, tctx)[token]);
              trace_rows->push_back({"specdec", lenience, K, i, step,
                                     from_teacher ? "teacher" : "student",
                                     token, lp});
              history.push_back(token);
              step += 1;
            }
          }
        }
        acc.instruction_ids.push_back(instruction);
        acc.outputs.push_back(std::move(x_out));
      }
      QualityResult q =
          quality_metric(teacher, prompts, acc.instruction_ids, acc.outputs);
      rows.push_back({"specdec", lenience, K, q.mean_logprob_per_token,
                      static_cast<double>(acc.teacher_units) / acc.emitted,
                      acc.cost_total / acc.emitted,
                      static_cast<int>(prompts.size()), suite.seed});
    }
  }

  // Pure-teacher greedy reference.
  {
    SweepAccumulator acc;
    for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
      int instruction = prompts[i].task * kNumBudgets;
      std::vector<int> history(prompts[i].tokens.begin(),
                               prompts[i].tokens.end());
      std::vector<int> out;
      for (int step = 0; step < suite.max_len; ++step) {
        Context tctx = make_context(teacher, instruction, history);
        int token = argmax_lowest(next_distribution(teacher, tctx));
        out.push_back(token);
        history.push_back(token);
        if (token == teacher.vocab.eos_id) break;
      }
      acc.emitted += static_cast<std::int64_t>(out.size());
      acc.teacher_units += static_cast<std::int64_t>(out.size());
      acc.cost_total += out.size() * cm.c_t;
      acc.instruction_ids.push_back(instruction);
      acc.outputs.push_back(std::move(out));
    }
    QualityResult q =
        quality_metric(teacher, prompts, acc.instruction_ids, acc.outputs);
    rows.push_back({"teacher", 0.0, 0, q.mean_logprob_per_token, 1.0,
                    acc.cost_total / acc.emitted,
                    static_cast<int>(prompts.size()), suite.seed});
  }
  return rows;
}

namespace {

int run_gen_task(const std::string& out_path, std::uint64_t seed) {
  write_file_atomic(out_path, config_to_json(default_config(seed)));
  return 0;
}

int run_train(const Config& config, const std::string& checkpoint_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(checkpoint_dir);

  TabularLM teacher = build_teacher(config.suite);
  StudentInitConfig init_cfg;
  init_cfg.max_len = config.suite.max_len;
  init_cfg.seed = derive_seed(config.suite.seed, 0x20);
  TabularLM student0 =
      derive_student_init(teacher, config.suite.student.order,
                          config.suite.student.smoothing, init_cfg);

  std::cerr << "phase 1: " << config.phase1.batches << " batches\n";
  TabularLM student1 = phase1_train(student0, teacher, config.phase1);

  std::cerr << "phase 2: " << config.phase2.batches << " batches\n";
  Phase2Result phase2 = phase2_train(student1, teacher, config.phase2);

  Manifest manifest;
  for (std::size_t i = 0; i < phase2.checkpoints.size(); ++i) {
    const Checkpoint& ck = phase2.checkpoints[i];
    char name[64];
    std::snprintf(name, sizeof(name), "student_b%06d.json", ck.batch);
    write_file_atomic((fs::path(checkpoint_dir) / name).string(),
                      dump_model(ck.model));
    manifest.checkpoints.push_back(
        {ck.batch, name, ck.window_use, ck.lambda});
  }

  std::cerr << "selecting checkpoint over "
            << config.selector.validation_prompts << " validation prompts\n";
  SelectionResult selection =
      select_checkpoint(phase2.checkpoints, teacher, config.selector);
  manifest.selected_index = selection.index;
  manifest.selection_flagged = selection.flagged;
  manifest.worst_violation = selection.worst_violation;
  manifest.measured_use = selection.measured_use;
  manifest.quality = selection.quality;
  manifest.selected_file = manifest.checkpoints[selection.index].file;

  std::cerr << "distilling draft model: " << config.gkd.batches
            << " batches\n";
  StudentInitConfig draft_init = init_cfg;
  draft_init.seed = derive_seed(config.suite.seed, 0x21);
  TabularLM draft0 = derive_draft_init(teacher, config.suite.student.order,
                                       config.suite.student.smoothing,
                                       draft_init);
  std::vector<std::vector<int>> train_prompts;
  std::vector<int> train_instructions;
  for (int i = 0; i < config.gkd.n_train_prompts; ++i) {
    Rng rng(derive_seed(config.gkd.seed, 0x22, i));
    train_prompts.push_back(
        random_prompt(config.suite.vocab, config.suite.prompt_len, rng));
    train_instructions.push_back((i % config.suite.n_tasks) * kNumBudgets);
  }
  DistillConfig distill_cfg;
  distill_cfg.lr = config.gkd.lr;
  distill_cfg.updates_per_batch = config.gkd.updates_per_batch;
  distill_cfg.max_len = config.suite.max_len;
  distill_cfg.seed = config.gkd.seed;
  TabularLM draft =
      reverse_kl_distill(draft0, teacher, train_prompts, train_instructions,
                         config.gkd.batches, DistillMix{}, distill_cfg);
  write_file_atomic((fs::path(checkpoint_dir) / "gkd_draft.json").string(),
                    dump_model(draft));
  manifest.draft_file = "gkd_draft.json";

  write_file_atomic((fs::path(checkpoint_dir) / "manifest.json").string(),
                    manifest_to_json(manifest));
  write_file_atomic((fs::path(checkpoint_dir) / "train_log.csv").string(),
                    train_log_csv(phase2.log));

  std::cerr << "selected checkpoint " << manifest.selected_file
            << (selection.flagged ? " (flagged: no checkpoint met every budget)"
                                  : "")
            << ", quality " << selection.quality << "\n";
  return 0;
}

struct LoadedArtifacts {
  TabularLM teacher;
  TabularLM student;
  TabularLM draft;
  Manifest manifest;
};

LoadedArtifacts load_artifacts(const Config& config,
                               const std::string& checkpoint_dir) {
  namespace fs = std::filesystem;
  fs::path manifest_path = fs::path(checkpoint_dir) / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw std::runtime_error("missing checkpoint manifest: expected " +
                             manifest_path.string() +
                             " (run the train subcommand first)");
  }
  LoadedArtifacts art;
  art.manifest = manifest_from_json(read_file(manifest_path.string()));
  art.teacher = build_teacher(config.suite);
  art.student = load_model(
      read_file((fs::path(checkpoint_dir) / art.manifest.selected_file)
                    .string()));
  art.draft = load_model(
      read_file((fs::path(checkpoint_dir) / art.manifest.draft_file)
                    .string()));
  return art;
}

int run_eval(const Config& config, const std::string& checkpoint_dir,
             const std::string& out_path) {
  LoadedArtifacts art = load_artifacts(config, checkpoint_dir);
  CheckpointSelector sel = config.selector;
  Checkpoint ck;
  ck.model = art.student;
  SelectionResult r = select_checkpoint({&ck, 1}, art.teacher, sel);

  std::ostringstream out;
  out << "budget,keyword,measured_use\n";
  for (int k = 0; k < kNumBudgets; ++k) {
    out << format_double(budget_specs()[k].b) << ','
        << budget_specs()[k].keyword << ',' << format_double(r.measured_use[k])
        << '\n';
  }
  out << "quality," << format_double(r.quality) << ",\n";
  if (out_path.empty()) {
    std::cout << out.str();
  } else {
    write_file_atomic(out_path, out.str());
  }
  return 0;
}

int run_sweep_cmd(const Config& config, const std::string& checkpoint_dir,
                  const std::string& out_path, bool verbose_traces) {
  LoadedArtifacts art = load_artifacts(config, checkpoint_dir);
  std::vector<TraceRow> trace_rows;
  std::vector<RunReport> rows =
      run_sweep(config, art.teacher, art.student, art.draft,
                verbose_traces ? &trace_rows : nullptr);
  write_file_atomic(out_path, report_csv(rows));
  if (verbose_traces) {
    write_file_atomic(out_path + ".traces.csv", trace_csv(trace_rows));
  }
  return 0;
}

int run_oracle_check(std::uint64_t seed) {
  std::vector<OracleReport> reports = run_all_checks(seed);
  print_reports(std::cout, reports);
  for (const OracleReport& r : reports) {
    if (!r.pass) return 1;
  }
  return 0;
}

}  // namespace

int cli_entry(int argc, const char* const* argv) {
  CLI::App app{"Tabular lab for budgeted student-teacher decoding"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::string checkpoint_dir;
  std::uint64_t seed = 1;
  bool seed_set = false;
  bool verbose_traces = false;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    if (needs_config) {
      cmd->add_option("--config", config_path, "config document path")
          ->required();
    }
    cmd->add_flag("--verbose-traces", verbose_traces,
                  "also write per-step decode traces");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t s) {
          seed = s;
          seed_set = true;
        },
        "seed override");
  };

  CLI::App* gen = app.add_subcommand("gen-task", "write a task-suite config");
  gen->add_option("--out", out_path, "output path")->required();
  add_common(gen, false);

  CLI::App* train = app.add_subcommand("train", "run phases 1+2 and the draft distillation");
  train->add_option("--checkpoints", checkpoint_dir, "checkpoint directory")
      ->required();
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "score the selected checkpoint");
  eval->add_option("--checkpoints", checkpoint_dir, "checkpoint directory")
      ->required();
  eval->add_option("--out", out_path, "optional output path");
  add_common(eval, true);

  CLI::App* sweep = app.add_subcommand("sweep", "produce the benchmark report");
  sweep->add_option("--checkpoints", checkpoint_dir, "checkpoint directory")
      ->required();
  sweep->add_option("--out", out_path, "report CSV path")->required();
  add_common(sweep, true);

  CLI::App* oracle = app.add_subcommand("oracle-check",
                                        "run the brute-force oracle suite");
  add_common(oracle, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      return run_gen_task(out_path, seed_set ? seed : 1);
    }
    Config config;
    if (!config_path.empty()) {
      config = config_from_json(read_file(config_path));
      if (seed_set) {
        config.suite.seed = seed;
      }
    }
    if (train->parsed()) return run_train(config, checkpoint_dir);
    if (eval->parsed()) return run_eval(config, checkpoint_dir, out_path);
    if (sweep->parsed()) {
      return run_sweep_cmd(config, checkpoint_dir, out_path, verbose_traces);
    }
    if (oracle->parsed()) return run_oracle_check(seed_set ? seed : 0x0acc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tandem
