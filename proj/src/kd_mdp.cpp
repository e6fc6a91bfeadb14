#include "tandem/kd_mdp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "json.hpp"

namespace tandem {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_enumeration_budget(int alphabet, int horizon,
                              std::int64_t budget) {
  double paths = std::pow(static_cast<double>(alphabet),
                          static_cast<double>(horizon));
  if (paths > static_cast<double>(budget)) {
    throw EnumerationBudgetError(
        "enumeration refused: " + std::to_string(alphabet) + "^" +
        std::to_string(horizon) + " complete paths exceed the budget of " +
        std::to_string(budget));
  }
}

}  // namespace

ValueTable::ValueTable(int n_instructions, int n_context_symbols, int order,
                       int n_steps)
    : n_instructions_(n_instructions),
      n_context_symbols_(n_context_symbols),
      order_(order),
      n_steps_(n_steps) {
  require(n_instructions >= 1 && n_context_symbols >= 1 && order >= 1 &&
              n_steps >= 1,
          "ValueTable: invalid dimensions");
  n_windows_ = codec().count();
  values_.assign(static_cast<std::size_t>(n_instructions_) * n_windows_ *
                     n_steps_,
                 0.0);
}

double ValueTable::at(int instruction_id, std::int64_t window_index,
                      int step) const {
  int s = std::clamp(step, 0, n_steps_ - 1);
  return values_[(instruction_id * n_windows_ + window_index) * n_steps_ + s];
}

double& ValueTable::at_mut(int instruction_id, std::int64_t window_index,
                           int step) {
  int s = std::clamp(step, 0, n_steps_ - 1);
  return values_[(instruction_id * n_windows_ + window_index) * n_steps_ + s];
}

void ValueTable::fill(double v) {
  std::fill(values_.begin(), values_.end(), v);
}

std::string ValueTable::dump() const {
  nlohmann::json doc;
  doc["schema"] = "value-table/1";
  doc["n_instructions"] = n_instructions_;
  doc["n_context_symbols"] = n_context_symbols_;
  doc["order"] = order_;
  doc["n_steps"] = n_steps_;
  doc["values"] = values_;
  return doc.dump();
}

namespace {

// Shared enumeration state: walks complete base-alphabet paths from a prompt,
// with eos absorbing and the horizon truncating.
struct PathEnumerator {
  const TabularLM& student;
  const TabularLM& teacher;
  int instruction_id;
  const SoftMDPConfig& cfg;

  // Accumulates sum over complete paths of pi(path) * (log pi - log p).
  double path_kl(std::vector<int>& history, int step, double log_pi,
                 double log_p, double prob) const {
    if (step == cfg.horizon) return prob * (log_pi - log_p);
    Context sctx = make_context(student, instruction_id, history);
    Context tctx = make_context(teacher, instruction_id, history);
    Distribution pi = base_distribution(student, sctx);
    Distribution p = next_distribution(teacher, tctx);
    double acc = 0.0;
    for (int x = 0; x < teacher.vocab.size; ++x) {
      double lpi = std::log(pi[x]);
      double lp = std::log(p[x]);
      if (x == teacher.vocab.eos_id) {
        acc += prob * pi[x] * (log_pi + lpi - log_p - lp);
        continue;
      }
      history.push_back(x);
      acc += path_kl(history, step + 1, log_pi + lpi, log_p + lp,
                     prob * pi[x]);
      history.pop_back();
    }
    return acc;
  }

  // Suffix expectation E_{i:T} from a state, by complete-suffix enumeration.
  double suffix_expectation(std::vector<int>& history, int step) const {
    return path_kl(history, step, 0.0, 0.0, 1.0);
  }
};

}  // namespace

double reverse_kl_exact(const TabularLM& student, const TabularLM& teacher,
                        int instruction_id, std::span<const int> prompt,
                        const SoftMDPConfig& cfg) {
  check_enumeration_budget(teacher.vocab.size, cfg.horizon,
                           cfg.enumeration_budget);
  PathEnumerator en{student, teacher, instruction_id, cfg};
  std::vector<int> history(prompt.begin(), prompt.end());
  return en.path_kl(history, 0, 0.0, 0.0, 1.0);
}

double recursion_residual(const TabularLM& student, const TabularLM& teacher,
                          int instruction_id, std::span<const int> prompt,
                          const SoftMDPConfig& cfg) {
  check_enumeration_budget(teacher.vocab.size, cfg.horizon,
                           cfg.enumeration_budget);
  PathEnumerator en{student, teacher, instruction_id, cfg};

  double worst = 0.0;
  // Visit every reachable prefix state and compare E_{i:T} against its
  // one-step expansion, both sides computed by independent enumerations.
  std::function<void(std::vector<int>&, int)> visit = [&](std::vector<int>&
                                                              history,
                                                          int step) {
    if (step == cfg.horizon) return;
    double direct = en.suffix_expectation(history, step);

    Context sctx = make_context(student, instruction_id, history);
    Context tctx = make_context(teacher, instruction_id, history);
    Distribution pi = base_distribution(student, sctx);
    Distribution p = next_distribution(teacher, tctx);
    double expanded = 0.0;
    for (int x = 0; x < teacher.vocab.size; ++x) {
      double ratio = std::log(pi[x]) - std::log(p[x]);
      double continuation = 0.0;
      if (x != teacher.vocab.eos_id && step + 1 < cfg.horizon) {
        history.push_back(x);
        continuation = en.suffix_expectation(history, step + 1);
        history.pop_back();
      }
      expanded += pi[x] * (ratio + continuation);
    }
    worst = std::max(worst, std::abs(direct - expanded));

    for (int x = 0; x < teacher.vocab.size; ++x) {
      if (x == teacher.vocab.eos_id) continue;
      history.push_back(x);
      visit(history, step + 1);
      history.pop_back();
    }
  };

  std::vector<int> history(prompt.begin(), prompt.end());
  visit(history, 0);
  return worst;
}

namespace {

double logsumexp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  double z = 0.0;
  for (double x : xs) z += std::exp(x - m);
  return m + std::log(z);
}

// Soft backup targets for one state at one step: log p(x|s) + gamma * V'.
std::vector<double> backup_targets(const TabularLM& teacher,
                                   const ValueTable& values,
                                   const SoftMDPConfig& cfg,
                                   int instruction_id,
                                   std::span<const int> window, int step) {
  Context ctx{instruction_id, {window.begin(), window.end()}};
  Distribution p = next_distribution(teacher, ctx);
  std::vector<double> targets(teacher.vocab.size);
  std::vector<int> next(window.begin(), window.end());
  for (int x = 0; x < teacher.vocab.size; ++x) {
    double continuation = 0.0;
    if (x != teacher.vocab.eos_id && step + 1 <= values.n_steps() - 1) {
      std::copy(window.begin(), window.end(), next.begin());
      push_symbol(next, x);
      continuation = values.at(instruction_id, values.codec().index(next),
                               step + 1);
    }
    targets[x] = std::log(p[x]) + cfg.gamma * continuation;
  }
  return targets;
}

}  // namespace

std::pair<ValueTable, TabularLM> soft_value_iteration(
    const TabularLM& teacher, const SoftMDPConfig& cfg) {
  require(cfg.tau >= 0.0, "soft_value_iteration: tau must be >= 0");
  require(cfg.horizon >= 0, "soft_value_iteration: horizon must be >= 0");

  ValueTable values(teacher.n_instructions, teacher.n_context_symbols,
                    teacher.order, cfg.horizon + 1);
  WindowCodec codec = teacher.codec();

  for (int step = cfg.horizon - 1; step >= 0; --step) {
    for (int instr = 0; instr < teacher.n_instructions; ++instr) {
      for (std::int64_t w = 0; w < codec.count(); ++w) {
        std::vector<int> window = codec.decode(w);
        if (window.back() == teacher.vocab.eos_id) {
          values.at_mut(instr, w, step) = 0.0;  // absorbed
          continue;
        }
        std::vector<double> targets =
            backup_targets(teacher, values, cfg, instr, window, step);
        if (cfg.tau > 0.0) {
          for (double& t : targets) t /= cfg.tau;
          values.at_mut(instr, w, step) =
              cfg.tau * logsumexp({targets.data(), targets.size()});
        } else {
          values.at_mut(instr, w, step) =
              *std::max_element(targets.begin(), targets.end());
        }
      }
    }
  }

  // Induced optimal policy at step 0, stored as logits.
  TabularLM policy = make_teacher_shell(teacher.vocab, teacher.order,
                                        teacher.n_instructions);
  for (int instr = 0; instr < teacher.n_instructions; ++instr) {
    for (std::int64_t w = 0; w < codec.count(); ++w) {
      std::vector<int> window = codec.decode(w);
      std::vector<double> targets =
          backup_targets(teacher, values, cfg, instr, window, /*step=*/0);
      std::span<double> row = policy.row(instr, window);
      if (cfg.tau > 0.0) {
        for (int x = 0; x < teacher.vocab.size; ++x) {
          row[x] = targets[x] / cfg.tau;
        }
      } else {
        int best = argmax_lowest(targets);
        for (int x = 0; x < teacher.vocab.size; ++x) {
          row[x] = (x == best) ? 0.0 : -1e9;
        }
      }
    }
  }
  return {std::move(values), std::move(policy)};
}

Distribution optimal_policy_distribution(const TabularLM& teacher,
                                         const ValueTable& values,
                                         const SoftMDPConfig& cfg,
                                         const Context& ctx, int step) {
  std::vector<double> targets = backup_targets(
      teacher, values, cfg, ctx.instruction_id, ctx.window, step);
  Distribution probs(targets.size(), 0.0);
  if (cfg.tau > 0.0) {
    double m = *std::max_element(targets.begin(), targets.end());
    double z = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      probs[i] = std::exp((targets[i] - m) / cfg.tau);
      z += probs[i];
    }
    for (double& p : probs) p /= z;
  } else {
    probs[argmax_lowest(targets)] = 1.0;
  }
  return probs;
}

double policy_value(const TabularLM& policy, const TabularLM& teacher,
                    const SoftMDPConfig& cfg, int instruction_id,
                    std::span<const int> prompt) {
  check_enumeration_budget(teacher.vocab.size, cfg.horizon,
                           cfg.enumeration_budget);
  std::function<double(std::vector<int>&, int)> eval =
      [&](std::vector<int>& history, int step) -> double {
    if (step == cfg.horizon) return 0.0;
    Context pctx = make_context(policy, instruction_id, history);
    Context tctx = make_context(teacher, instruction_id, history);
    Distribution pi = base_distribution(policy, pctx);
    Distribution p = next_distribution(teacher, tctx);
    double v = 0.0;
    for (int x = 0; x < teacher.vocab.size; ++x) {
      double term = std::log(p[x]) - cfg.tau * std::log(pi[x]);
      if (x != teacher.vocab.eos_id) {
        history.push_back(x);
        term += cfg.gamma * eval(history, step + 1);
        history.pop_back();
      }
      v += pi[x] * term;
    }
    return v;
  };
  std::vector<int> history(prompt.begin(), prompt.end());
  return eval(history, 0);
}

}  // namespace tandem
