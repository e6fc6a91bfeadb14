#include "tandem/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tandem {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << content;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return {buf, ptr};
}

namespace {

std::string sampling_name(SamplingMode mode) {
  return mode == SamplingMode::greedy ? "greedy" : "seeded";
}

SamplingMode sampling_from(const std::string& name) {
  if (name == "greedy") return SamplingMode::greedy;
  if (name == "seeded") return SamplingMode::seeded;
  throw std::runtime_error("unknown sampling mode: " + name);
}

std::string accounting_name(ConstraintAccounting a) {
  return a == ConstraintAccounting::fraction_of_total ? "fraction_of_total"
                                                      : "indicator_balance";
}

ConstraintAccounting accounting_from(const std::string& name) {
  if (name == "fraction_of_total") {
    return ConstraintAccounting::fraction_of_total;
  }
  if (name == "indicator_balance") {
    return ConstraintAccounting::indicator_balance;
  }
  throw std::runtime_error("unknown accounting mode: " + name);
}

}  // namespace

std::string config_to_json(const Config& c) {
  nlohmann::json doc;
  doc["schema"] = "tandem-config/1";

  nlohmann::json suite;
  suite["seed"] = c.suite.seed;
  suite["vocab_size"] = c.suite.vocab.size;
  suite["eos_id"] = c.suite.vocab.eos_id;
  suite["n_tasks"] = c.suite.n_tasks;
  suite["teacher_seed"] = c.suite.teacher.seed;
  suite["teacher_order"] = c.suite.teacher.order;
  suite["teacher_concentration"] = c.suite.teacher.concentration;
  suite["student_order"] = c.suite.student.order;
  suite["student_smoothing"] = c.suite.student.smoothing;
  suite["prompt_count"] = c.suite.prompt_count;
  suite["prompt_len"] = c.suite.prompt_len;
  suite["max_len"] = c.suite.max_len;
  suite["eval_sampling"] = sampling_name(c.suite.eval_sampling);
  doc["suite"] = suite;

  nlohmann::json p1;
  p1["batches"] = c.phase1.batches;
  p1["batch_size"] = c.phase1.batch_size;
  p1["lr"] = c.phase1.lr;
  p1["max_len"] = c.phase1.max_len;
  p1["prompt_len"] = c.phase1.prompt_len;
  p1["guard_as_printed"] = c.phase1.guard_as_printed;
  p1["seed"] = c.phase1.seed;
  doc["phase1"] = p1;

  nlohmann::json p2;
  p2["batches"] = c.phase2.batches;
  p2["updates_per_batch"] = c.phase2.updates_per_batch;
  p2["checkpoint_every"] = c.phase2.checkpoint_every;
  p2["tau"] = c.phase2.pcl.tau;
  p2["gamma"] = c.phase2.pcl.gamma;
  p2["window_d"] = c.phase2.pcl.window_d;
  p2["lr_policy"] = c.phase2.pcl.lr_policy;
  p2["lr_value"] = c.phase2.pcl.lr_value;
  p2["replay_capacity"] = c.phase2.pcl.replay_capacity;
  p2["max_len"] = c.phase2.max_len;
  p2["prompt_len"] = c.phase2.prompt_len;
  p2["lambda_eta"] = c.phase2.lambda_eta;
  p2["lambda_cap"] = c.phase2.lambda_cap;
  p2["lambda_window"] = c.phase2.lambda_window;
  p2["accounting"] = accounting_name(c.phase2.accounting);
  p2["reward_stat_window"] = c.phase2.reward_stat_window;
  p2["divergence_guard"] = c.phase2.divergence_guard;
  p2["kl_log_budget"] = c.phase2.kl_log_budget;
  p2["kl_log_every"] = c.phase2.kl_log_every;
  p2["seed"] = c.phase2.seed;
  doc["phase2"] = p2;

  nlohmann::json gkd;
  gkd["batches"] = c.gkd.batches;
  gkd["updates_per_batch"] = c.gkd.updates_per_batch;
  gkd["lr"] = c.gkd.lr;
  gkd["n_train_prompts"] = c.gkd.n_train_prompts;
  gkd["seed"] = c.gkd.seed;
  doc["gkd"] = gkd;

  nlohmann::json sel;
  sel["delta"] = c.selector.delta;
  sel["validation_prompts"] = c.selector.validation_prompts;
  sel["prompt_len"] = c.selector.prompt_len;
  sel["max_len"] = c.selector.max_len;
  sel["sampling"] = sampling_name(c.selector.sampling);
  sel["seed"] = c.selector.seed;
  doc["selector"] = sel;

  nlohmann::json sweep;
  sweep["draft_lens"] = c.sweep.draft_lens;
  sweep["lenience_steps"] = c.sweep.lenience_steps;
  sweep["cost_student"] = c.sweep.cost_model.c_s;
  sweep["cost_teacher"] = c.sweep.cost_model.c_t;
  doc["sweep"] = sweep;

  return doc.dump(2) + "\n";
}

Config config_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("config parse error: ") + e.what());
  }
  if (doc.value("schema", "") != "tandem-config/1") {
    throw std::runtime_error("config: unknown schema field");
  }
  Config c;
  const auto& suite = doc.at("suite");
  c.suite.seed = suite.at("seed").get<std::uint64_t>();
  c.suite.vocab.size = suite.at("vocab_size").get<int>();
  c.suite.vocab.eos_id = suite.at("eos_id").get<int>();
  c.suite.n_tasks = suite.at("n_tasks").get<int>();
  c.suite.teacher.seed = suite.at("teacher_seed").get<std::uint64_t>();
  c.suite.teacher.order = suite.at("teacher_order").get<int>();
  c.suite.teacher.concentration =
      suite.at("teacher_concentration").get<double>();
  c.suite.student.order = suite.at("student_order").get<int>();
  c.suite.student.smoothing = suite.at("student_smoothing").get<double>();
  c.suite.prompt_count = suite.at("prompt_count").get<int>();
  c.suite.prompt_len = suite.at("prompt_len").get<int>();
  c.suite.max_len = suite.at("max_len").get<int>();
  c.suite.eval_sampling =
      sampling_from(suite.at("eval_sampling").get<std::string>());

  const auto& p1 = doc.at("phase1");
  c.phase1.batches = p1.at("batches").get<int>();
  c.phase1.batch_size = p1.at("batch_size").get<int>();
  c.phase1.lr = p1.at("lr").get<double>();
  c.phase1.max_len = p1.at("max_len").get<int>();
  c.phase1.prompt_len = p1.at("prompt_len").get<int>();
  c.phase1.guard_as_printed = p1.at("guard_as_printed").get<bool>();
  c.phase1.seed = p1.at("seed").get<std::uint64_t>();

  const auto& p2 = doc.at("phase2");
  c.phase2.batches = p2.at("batches").get<int>();
  c.phase2.updates_per_batch = p2.at("updates_per_batch").get<int>();
  c.phase2.checkpoint_every = p2.at("checkpoint_every").get<int>();
  c.phase2.pcl.tau = p2.at("tau").get<double>();
  c.phase2.pcl.gamma = p2.at("gamma").get<double>();
  c.phase2.pcl.window_d = p2.at("window_d").get<int>();
  c.phase2.pcl.lr_policy = p2.at("lr_policy").get<double>();
  c.phase2.pcl.lr_value = p2.at("lr_value").get<double>();
  c.phase2.pcl.replay_capacity = p2.at("replay_capacity").get<int>();
  c.phase2.pcl.updates_per_batch = c.phase2.updates_per_batch;
  c.phase2.max_len = p2.at("max_len").get<int>();
  c.phase2.prompt_len = p2.at("prompt_len").get<int>();
  c.phase2.lambda_eta = p2.at("lambda_eta").get<double>();
  c.phase2.lambda_cap = p2.at("lambda_cap").get<double>();
  c.phase2.lambda_window = p2.at("lambda_window").get<int>();
  c.phase2.accounting =
      accounting_from(p2.at("accounting").get<std::string>());
  c.phase2.reward_stat_window = p2.at("reward_stat_window").get<int>();
  c.phase2.divergence_guard = p2.at("divergence_guard").get<double>();
  c.phase2.kl_log_budget = p2.at("kl_log_budget").get<std::int64_t>();
  c.phase2.kl_log_every = p2.at("kl_log_every").get<int>();
  c.phase2.seed = p2.at("seed").get<std::uint64_t>();

  const auto& gkd = doc.at("gkd");
  c.gkd.batches = gkd.at("batches").get<int>();
  c.gkd.updates_per_batch = gkd.at("updates_per_batch").get<int>();
  c.gkd.lr = gkd.at("lr").get<double>();
  c.gkd.n_train_prompts = gkd.at("n_train_prompts").get<int>();
  c.gkd.seed = gkd.at("seed").get<std::uint64_t>();

  const auto& sel = doc.at("selector");
  c.selector.delta = sel.at("delta").get<double>();
  c.selector.validation_prompts = sel.at("validation_prompts").get<int>();
  c.selector.prompt_len = sel.at("prompt_len").get<int>();
  c.selector.max_len = sel.at("max_len").get<int>();
  c.selector.sampling = sampling_from(sel.at("sampling").get<std::string>());
  c.selector.seed = sel.at("seed").get<std::uint64_t>();

  const auto& sweep = doc.at("sweep");
  c.sweep.draft_lens = sweep.at("draft_lens").get<std::vector<int>>();
  c.sweep.lenience_steps = sweep.at("lenience_steps").get<int>();
  c.sweep.cost_model.c_s = sweep.at("cost_student").get<double>();
  c.sweep.cost_model.c_t = sweep.at("cost_teacher").get<double>();
  return c;
}

namespace {

std::string csv_number(double v) {
  return std::isnan(v) ? std::string() : format_double(v);
}

}  // namespace

std::string report_csv(std::span<const RunReport> rows) {
  std::ostringstream out;
  out << "method,param,draft_len,quality_nats_per_token,teacher_use_fraction,"
         "cost_per_token,n_prompts,seed\n";
  for (const RunReport& r : rows) {
    out << r.method << ',' << format_double(r.param) << ',' << r.draft_len
        << ',' << format_double(r.quality_nats_per_token) << ','
        << format_double(r.teacher_use_fraction) << ','
        << format_double(r.cost_per_token) << ',' << r.n_prompts << ','
        << r.seed << '\n';
  }
  return out.str();
}

std::string train_log_csv(std::span<const TrainLogRow> rows) {
  std::ostringstream out;
  out << "phase,batch,loss,mean_abs_residual,reverse_kl";
  for (int k = 0; k < kNumBudgets; ++k) out << ",use_b" << k;
  for (int k = 0; k < kNumBudgets; ++k) out << ",lambda_b" << k;
  out << '\n';
  for (const TrainLogRow& r : rows) {
    out << r.phase << ',' << r.batch << ',' << format_double(r.loss) << ','
        << format_double(r.mean_abs_residual) << ','
        << csv_number(r.reverse_kl);
    for (int k = 0; k < kNumBudgets; ++k) {
      out << ',' << format_double(r.teacher_use[k]);
    }
    for (int k = 0; k < kNumBudgets; ++k) {
      out << ',' << format_double(r.lambda[k]);
    }
    out << '\n';
  }
  return out.str();
}

std::string trace_csv(std::span<const TraceRow> rows) {
  std::ostringstream out;
  out << "method,param,draft_len,prompt_idx,step,origin,token,"
         "teacher_logprob\n";
  for (const TraceRow& r : rows) {
    out << r.method << ',' << format_double(r.param) << ',' << r.draft_len
        << ',' << r.prompt_idx << ',' << r.step << ',' << r.origin << ','
        << r.token << ',' << format_double(r.teacher_logprob) << '\n';
  }
  return out.str();
}

std::string manifest_to_json(const Manifest& m) {
  nlohmann::json doc;
  doc["schema"] = "tandem-manifest/1";
  nlohmann::json entries = nlohmann::json::array();
  for (const ManifestEntry& e : m.checkpoints) {
    nlohmann::json j;
    j["batch"] = e.batch;
    j["file"] = e.file;
    j["window_use"] = e.window_use;
    j["lambda"] = e.lambda;
    entries.push_back(j);
  }
  doc["checkpoints"] = entries;
  doc["selected_index"] = m.selected_index;
  doc["selection_flagged"] = m.selection_flagged;
  doc["worst_violation"] = m.worst_violation;
  doc["measured_use"] = m.measured_use;
  doc["quality"] = m.quality;
  doc["selected_file"] = m.selected_file;
  doc["draft_file"] = m.draft_file;
  return doc.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  if (doc.value("schema", "") != "tandem-manifest/1") {
    throw std::runtime_error("manifest: unknown schema field");
  }
  Manifest m;
  for (const auto& j : doc.at("checkpoints")) {
    ManifestEntry e;
    e.batch = j.at("batch").get<int>();
    e.file = j.at("file").get<std::string>();
    e.window_use = j.at("window_use").get<std::array<double, kNumBudgets>>();
    e.lambda = j.at("lambda").get<std::array<double, kNumBudgets>>();
    m.checkpoints.push_back(std::move(e));
  }
  m.selected_index = doc.at("selected_index").get<int>();
  m.selection_flagged = doc.at("selection_flagged").get<bool>();
  m.worst_violation = doc.at("worst_violation").get<double>();
  m.measured_use = doc.at("measured_use").get<std::array<double, kNumBudgets>>();
  m.quality = doc.at("quality").get<double>();
  m.selected_file = doc.at("selected_file").get<std::string>();
  m.draft_file = doc.at("draft_file").get<std::string>();
  return m;
}

}  // namespace tandem
