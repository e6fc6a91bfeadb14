#include "tandem/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace tandem {

namespace {

constexpr double kMaskedLogit = -1e9;
constexpr double kTauInitLogit = -10.0;  // keeps initial p(<tau>) under 1e-4

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void Vocab::validate() const {
  require(size >= 2, "Vocab: size must be >= 2");
  require(eos_id >= 0 && eos_id < size, "Vocab: eos_id out of range");
}

int embed_augmented(const AugAlphabet& alphabet, int token) {
  require(token >= 0 && token < 2 * alphabet.base_size,
          "embed_augmented: id outside the augmented input alphabet");
  return token;
}

std::int64_t WindowCodec::count() const {
  std::int64_t n = 1;
  for (int i = 0; i < order; ++i) n *= n_symbols;
  return n;
}

std::int64_t WindowCodec::index(std::span<const int> window) const {
  require(static_cast<int>(window.size()) == order,
          "WindowCodec: window length != order");
  std::int64_t idx = 0;
  for (int s : window) {
    require(s >= 0 && s < n_symbols, "WindowCodec: symbol out of range");
    idx = idx * n_symbols + s;
  }
  return idx;
}

std::vector<int> WindowCodec::decode(std::int64_t index) const {
  std::vector<int> window(order, 0);
  for (int i = order - 1; i >= 0; --i) {
    window[i] = static_cast<int>(index % n_symbols);
    index /= n_symbols;
  }
  return window;
}

std::int64_t TabularLM::row_offset(int instruction_id,
                                   std::span<const int> window) const {
  if (instruction_id < 0 || instruction_id >= n_instructions) {
    throw std::runtime_error("TabularLM: unknown instruction id " +
                             std::to_string(instruction_id));
  }
  std::int64_t w = codec().index(window);
  return (instruction_id * n_windows() + w) * n_actions;
}

std::span<double> TabularLM::row(int instruction_id,
                                 std::span<const int> window) {
  return {logits.data() + row_offset(instruction_id, window),
          static_cast<std::size_t>(n_actions)};
}

std::span<const double> TabularLM::row(int instruction_id,
                                       std::span<const int> window) const {
  return {logits.data() + row_offset(instruction_id, window),
          static_cast<std::size_t>(n_actions)};
}

bool TabularLM::action_is_legal(int action) const {
  if (action < 0 || action >= n_actions) return false;
  if (legal_actions.empty()) return true;
  return std::binary_search(legal_actions.begin(), legal_actions.end(),
                            action);
}

void TabularLM::validate() const {
  vocab.validate();
  require(order >= 1, "TabularLM: order must be >= 1");
  require(n_context_symbols >= 2, "TabularLM: context symbol domain too small");
  require(n_actions >= 1, "TabularLM: no actions");
  require(n_instructions >= 1, "TabularLM: no instructions");
  require(static_cast<std::int64_t>(logits.size()) == row_count() * n_actions,
          "TabularLM: logits size mismatch");
  for (double v : logits) {
    require(std::isfinite(v), "TabularLM: non-finite logit");
  }
  for (int a : legal_actions) {
    require(a >= 0 && a < n_actions, "TabularLM: legal action out of range");
  }
  require(std::is_sorted(legal_actions.begin(), legal_actions.end()),
          "TabularLM: legal_actions must be sorted");
}

TabularLM make_teacher_shell(const Vocab& vocab, int order,
                             int n_instructions) {
  vocab.validate();
  TabularLM m;
  m.order = order;
  m.n_context_symbols = vocab.size + 1;  // base + pad
  m.n_actions = vocab.size;
  m.n_instructions = n_instructions;
  m.vocab = vocab;
  m.logits.assign(m.row_count() * m.n_actions, 0.0);
  return m;
}

TabularLM make_student_shell(const Vocab& vocab, int order,
                             int n_instructions) {
  vocab.validate();
  AugAlphabet aug{vocab.size};
  TabularLM m;
  m.order = order;
  m.n_context_symbols = aug.input_symbol_count();  // base+shifted+pad
  m.n_actions = aug.action_count();
  m.n_instructions = n_instructions;
  m.vocab = vocab;
  for (int t = 0; t < vocab.size; ++t) m.legal_actions.push_back(t);
  m.legal_actions.push_back(aug.tau_id());
  m.logits.assign(m.row_count() * m.n_actions, 0.0);
  return m;
}

Context make_context(const TabularLM& model, int instruction_id,
                     std::span<const int> history) {
  Context ctx;
  ctx.instruction_id = instruction_id;
  ctx.window.assign(model.order, model.pad_id());
  int n = static_cast<int>(history.size());
  int take = std::min(n, model.order);
  for (int i = 0; i < take; ++i) {
    ctx.window[model.order - take + i] = history[n - take + i];
  }
  return ctx;
}

void push_symbol(std::vector<int>& window, int symbol) {
  for (std::size_t i = 0; i + 1 < window.size(); ++i) window[i] = window[i + 1];
  window.back() = symbol;
}

namespace {

Distribution masked_softmax(std::span<const double> row,
                            const TabularLM& model,
                            bool base_only) {
  Distribution probs(row.size(), 0.0);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < static_cast<int>(row.size()); ++a) {
    if (!model.action_is_legal(a)) continue;
    if (base_only && a >= model.vocab.size) continue;
    max_logit = std::max(max_logit, row[a]);
  }
  require(std::isfinite(max_logit), "softmax: no legal action in subset");
  double z = 0.0;
  for (int a = 0; a < static_cast<int>(row.size()); ++a) {
    if (!model.action_is_legal(a)) continue;
    if (base_only && a >= model.vocab.size) continue;
    probs[a] = std::exp(row[a] - max_logit);
    z += probs[a];
  }
  for (double& p : probs) p /= z;
  return probs;
}

}  // namespace

Distribution next_distribution(const TabularLM& model, const Context& ctx) {
  return masked_softmax(model.row(ctx.instruction_id, ctx.window), model,
                        /*base_only=*/false);
}

Distribution base_distribution(const TabularLM& model, const Context& ctx) {
  return masked_softmax(model.row(ctx.instruction_id, ctx.window), model,
                        /*base_only=*/true);
}

double sequence_logprob(const TabularLM& model, const Context& prompt,
                        std::span<const int> seq) {
  require(static_cast<int>(prompt.window.size()) == model.order,
          "sequence_logprob: prompt window length != order");
  Context ctx = prompt;
  double total = 0.0;
  for (int token : seq) {
    require(model.action_is_legal(token),
            "sequence_logprob: token is not a legal action");
    require(token < model.pad_id(),
            "sequence_logprob: token is not a context symbol");
    Distribution dist = next_distribution(model, ctx);
    total += std::log(dist[token]);
    push_symbol(ctx.window, token);
  }
  return total;
}

int argmax_lowest(std::span<const double> values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

int inverse_cdf_sample(const Distribution& dist, double u) {
  double cum = 0.0;
  int last_positive = -1;
  for (int i = 0; i < static_cast<int>(dist.size()); ++i) {
    if (dist[i] <= 0.0) continue;
    cum += dist[i];
    last_positive = i;
    if (u < cum) return i;
  }
  return last_positive;  // guards the cum < 1 rounding tail
}

int sample_token(const TabularLM& model, const Context& ctx,
                 std::uint64_t rng_seed, bool greedy) {
  Distribution dist = next_distribution(model, ctx);
  if (greedy) return argmax_lowest(dist);
  Rng rng(rng_seed);
  return inverse_cdf_sample(dist, rng.next_double());
}

TabularLM random_teacher(std::uint64_t seed, int order, const Vocab& vocab,
                         double concentration, int n_instructions) {
  require(concentration > 0.0, "random_teacher: concentration must be > 0");
  TabularLM m = make_teacher_shell(vocab, order, n_instructions);
  Rng rng(derive_seed(seed, /*stream=*/0x7eac));
  for (double& v : m.logits) v = concentration * rng.next_normal();
  return m;
}

TabularLM replicate_instructions(const TabularLM& model, int copies) {
  require(copies >= 1, "replicate_instructions: copies must be >= 1");
  TabularLM out = model;
  out.n_instructions = model.n_instructions * copies;
  out.logits.resize(out.row_count() * out.n_actions);
  std::int64_t row_bytes = model.n_windows() * model.n_actions;
  for (int i = 0; i < out.n_instructions; ++i) {
    std::copy_n(model.logits.data() + (i / copies) * row_bytes, row_bytes,
                out.logits.data() + i * row_bytes);
  }
  return out;
}

namespace {

// Visitation-weighted marginalization of teacher conditionals onto
// truncated windows over {base tokens, pad}. Rollouts start from the empty
// context; each visited step accumulates the teacher's full conditional at
// the truncated-window key.
struct MarginalizedInit {
  // indexed by truncated-window id over (base + student-pad) symbols,
  // using the codec passed in
  std::vector<Distribution> mean_rows;
  std::vector<bool> visited;
};

MarginalizedInit marginalize_teacher(const TabularLM& teacher,
                                     const WindowCodec& trunc_codec,
                                     int trunc_pad_id, int instruction_id,
                                     const StudentInitConfig& cfg) {
  MarginalizedInit out;
  std::int64_t n = trunc_codec.count();
  out.mean_rows.assign(n, Distribution(teacher.n_actions, 0.0));
  out.visited.assign(n, false);
  std::vector<double> counts(n, 0.0);

  const int V = teacher.vocab.size;
  for (int ep = 0; ep < cfg.n_rollouts; ++ep) {
    Rng rng(derive_seed(cfg.seed, instruction_id, ep));
    std::vector<int> history;
    for (int step = 0; step < cfg.max_len; ++step) {
      Context tctx = make_context(teacher, instruction_id, history);
      Distribution dist = next_distribution(teacher, tctx);

      std::vector<int> trunc(trunc_codec.order, trunc_pad_id);
      int take = std::min<int>(history.size(), trunc_codec.order);
      for (int i = 0; i < take; ++i) {
        trunc[trunc_codec.order - take + i] =
            history[history.size() - take + i];
      }
      std::int64_t key = trunc_codec.index(trunc);
      for (int a = 0; a < teacher.n_actions; ++a) {
        out.mean_rows[key][a] += dist[a];
      }
      counts[key] += 1.0;
      out.visited[key] = true;

      int token = inverse_cdf_sample(dist, rng.next_double());
      if (token == teacher.vocab.eos_id) break;
      history.push_back(token);
    }
  }

  // Unvisited truncated windows fall back to the unweighted average over all
  // teacher windows whose suffix matches (teacher pad mapped to the
  // truncated pad); windows with no compatible teacher row get uniform.
  WindowCodec tcodec = teacher.codec();
  for (std::int64_t key = 0; key < n; ++key) {
    if (out.visited[key]) {
      for (double& v : out.mean_rows[key]) v /= counts[key];
      continue;
    }
    std::vector<int> want = trunc_codec.decode(key);
    double matches = 0.0;
    for (std::int64_t w = 0; w < tcodec.count(); ++w) {
      std::vector<int> tw = tcodec.decode(w);
      bool ok = true;
      for (int i = 0; i < trunc_codec.order; ++i) {
        int sym = tw[tcodec.order - trunc_codec.order + i];
        if (sym == teacher.pad_id()) sym = trunc_pad_id;
        if (sym != want[i]) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      Context tctx{/*instruction_id=*/instruction_id, tw};
      Distribution dist = next_distribution(teacher, tctx);
      for (int a = 0; a < teacher.n_actions; ++a) {
        out.mean_rows[key][a] += dist[a];
      }
      matches += 1.0;
    }
    if (matches > 0.0) {
      for (double& v : out.mean_rows[key]) v /= matches;
    } else {
      for (double& v : out.mean_rows[key]) v = 1.0 / V;
    }
  }
  return out;
}

// Smoothed, max-centered logits of a base-alphabet probability row.
void fill_base_logits(std::span<double> row, const Distribution& probs,
                      double smoothing, int V) {
  double max_logit = -std::numeric_limits<double>::infinity();
  std::vector<double> z(V);
  for (int a = 0; a < V; ++a) {
    double p = (1.0 - smoothing) * probs[a] + smoothing / V;
    z[a] = std::log(p);
    max_logit = std::max(max_logit, z[a]);
  }
  for (int a = 0; a < V; ++a) row[a] = z[a] - max_logit;
}

}  // namespace

TabularLM derive_student_init(const TabularLM& teacher, int student_order,
                              double smoothing, const StudentInitConfig& cfg) {
  require(student_order >= 1 && student_order <= teacher.order,
          "derive_student_init: student order must be in [1, teacher order]");
  require(smoothing >= 0.0 && smoothing < 1.0,
          "derive_student_init: smoothing must be in [0, 1)");
  const int V = teacher.vocab.size;
  AugAlphabet aug{V};
  TabularLM student =
      make_student_shell(teacher.vocab, student_order, teacher.n_instructions);

  // Marginalize over {base, pad} windows first. Pad inside the truncated
  // window is encoded with the *student* pad id so keys match directly.
  WindowCodec base_codec{V + 1, student_order};
  const int base_pad = V;

  for (int instr = 0; instr < teacher.n_instructions; ++instr) {
    MarginalizedInit marg =
        marginalize_teacher(teacher, base_codec, base_pad, instr, cfg);

    WindowCodec scodec = student.codec();
    for (std::int64_t w = 0; w < scodec.count(); ++w) {
      std::vector<int> window = scodec.decode(w);
      // De-shift teacher-origin symbols to find the base-window key; windows
      // mixing pad into non-prefix positions simply reuse the fallback rows.
      std::vector<int> base_window(student_order);
      for (int i = 0; i < student_order; ++i) {
        int sym = window[i];
        if (sym == student.pad_id()) {
          base_window[i] = base_pad;
        } else {
          base_window[i] = aug.deshift(sym);
        }
      }
      std::span<double> row = student.row(instr, window);
      fill_base_logits(row, marg.mean_rows[base_codec.index(base_window)],
                       smoothing, V);
      for (int t = 0; t < V; ++t) row[aug.shift(t)] = kMaskedLogit;
      row[aug.tau_id()] = kTauInitLogit;
    }
  }
  return student;
}

TabularLM derive_draft_init(const TabularLM& teacher, int draft_order,
                            double smoothing, const StudentInitConfig& cfg) {
  require(draft_order >= 1 && draft_order <= teacher.order,
          "derive_draft_init: draft order must be in [1, teacher order]");
  const int V = teacher.vocab.size;
  TabularLM draft =
      make_teacher_shell(teacher.vocab, draft_order, teacher.n_instructions);
  WindowCodec codec = draft.codec();

  for (int instr = 0; instr < teacher.n_instructions; ++instr) {
    MarginalizedInit marg =
        marginalize_teacher(teacher, codec, draft.pad_id(), instr, cfg);
    for (std::int64_t w = 0; w < codec.count(); ++w) {
      std::vector<int> window = codec.decode(w);
      fill_base_logits(draft.row(instr, window), marg.mean_rows[w], smoothing,
                       V);
    }
  }
  return draft;
}

std::vector<int> random_prompt(const Vocab& vocab, int length, Rng& rng) {
  std::vector<int> prompt(length);
  for (int& t : prompt) {
    int idx = static_cast<int>(rng.next_below(vocab.size - 1));
    t = idx >= vocab.eos_id ? idx + 1 : idx;
  }
  return prompt;
}

std::string dump_model(const TabularLM& model) {
  nlohmann::json doc;
  doc["schema"] = "tabular-lm/1";
  doc["order"] = model.order;
  doc["n_context_symbols"] = model.n_context_symbols;
  doc["n_actions"] = model.n_actions;
  doc["n_instructions"] = model.n_instructions;
  doc["vocab_size"] = model.vocab.size;
  doc["eos_id"] = model.vocab.eos_id;
  doc["legal_actions"] = model.legal_actions;
  doc["logits"] = model.logits;
  return doc.dump();
}

TabularLM load_model(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  if (doc.value("schema", "") != "tabular-lm/1") {
    throw std::runtime_error("load_model: unknown schema");
  }
  TabularLM m;
  m.order = doc.at("order").get<int>();
  m.n_context_symbols = doc.at("n_context_symbols").get<int>();
  m.n_actions = doc.at("n_actions").get<int>();
  m.n_instructions = doc.at("n_instructions").get<int>();
  m.vocab.size = doc.at("vocab_size").get<int>();
  m.vocab.eos_id = doc.at("eos_id").get<int>();
  m.legal_actions = doc.at("legal_actions").get<std::vector<int>>();
  m.logits = doc.at("logits").get<std::vector<double>>();
  m.validate();
  return m;
}

}  // namespace tandem
