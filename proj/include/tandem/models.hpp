#pragma once

// Tabular autoregressive models over small alphabets. A TabularLM stores one
// logit row per (instruction, context window) pair and serves as teacher,
// student policy, or draft model. Everything is exact: distributions come
// from max-centered softmax over the stored row, and every sampling path is
// replayable from an explicit seed.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/rng.hpp"

namespace tandem {

struct Vocab {
  int size = 0;    // base tokens, eos included
  int eos_id = 0;  // terminal token

  void validate() const;
};

// Id arithmetic for the student's augmented space over a base alphabet of
// size B:
//   0 .. B-1      base tokens
//   B .. 2B-1     teacher-origin tokens (base id + B), context symbols only
//   2B            <call-teacher> action; never appears in a context window
// The student's context windows additionally use a pad symbol, which is the
// last context id of the model that owns the window.
struct AugAlphabet {
  int base_size = 0;

  int shift(int base_token) const { return base_token + base_size; }
  int deshift(int id) const { return is_shifted(id) ? id - base_size : id; }
  bool is_base(int id) const { return id >= 0 && id < base_size; }
  bool is_shifted(int id) const {
    return id >= base_size && id < 2 * base_size;
  }
  int tau_id() const { return 2 * base_size; }
  // Context symbol domain: base + shifted + pad.
  int input_symbol_count() const { return 2 * base_size + 1; }
  // Action row width: base + (masked) shifted block + <call-teacher>.
  int action_count() const { return 2 * base_size + 1; }
};

// Maps an emitted x_in entry to the student's context symbol index. Identity
// by construction; kept as the single documented crossing point between the
// decode protocol's token ids and the student table's input indexing.
int embed_augmented(const AugAlphabet& alphabet, int token);

// Mixed-radix indexing of fixed-length context windows.
struct WindowCodec {
  int n_symbols = 0;
  int order = 0;

  std::int64_t count() const;
  std::int64_t index(std::span<const int> window) const;
  std::vector<int> decode(std::int64_t index) const;
};

struct Context {
  int instruction_id = 0;
  std::vector<int> window;  // length must equal the model's order
};

// probs over a model's action row; entries sum to 1, illegal actions are 0.
using Distribution = std::vector<double>;

struct TabularLM {
  int order = 1;
  int n_context_symbols = 0;  // window symbol domain; pad is the last id
  int n_actions = 0;          // logit row width
  int n_instructions = 1;
  Vocab vocab;
  // Sorted action ids the model may emit; empty means every action is legal.
  std::vector<int> legal_actions;
  std::vector<double> logits;  // [instruction][window][action], row-major

  int pad_id() const { return n_context_symbols - 1; }
  WindowCodec codec() const { return WindowCodec{n_context_symbols, order}; }
  std::int64_t n_windows() const { return codec().count(); }
  std::int64_t row_count() const { return n_instructions * n_windows(); }

  std::int64_t row_offset(int instruction_id,
                          std::span<const int> window) const;
  std::span<double> row(int instruction_id, std::span<const int> window);
  std::span<const double> row(int instruction_id,
                              std::span<const int> window) const;
  bool action_is_legal(int action) const;

  void validate() const;
};

// Empty-logit shells with the right geometry.
TabularLM make_teacher_shell(const Vocab& vocab, int order,
                             int n_instructions);
TabularLM make_student_shell(const Vocab& vocab, int order,
                             int n_instructions);

// Builds the model-specific window for a raw token history: last `order`
// symbols, left-padded with the model's pad id.
Context make_context(const TabularLM& model, int instruction_id,
                     std::span<const int> history);

// Slides a window one symbol to the left and appends `symbol`.
void push_symbol(std::vector<int>& window, int symbol);

// Softmax of the stored logit row restricted to legal actions; illegal
// entries are exactly 0. Deterministic for fixed inputs.
Distribution next_distribution(const TabularLM& model, const Context& ctx);

// Softmax of the row restricted to the base alphabet only (legal ∩ [0, V)),
// i.e. the student distribution renormalized to base tokens.
Distribution base_distribution(const TabularLM& model, const Context& ctx);

// Sum of per-step log-probabilities of `seq` under sliding contexts starting
// from `prompt`. Empty sequence scores 0. Tokens must be legal actions that
// are also valid context symbols.
double sequence_logprob(const TabularLM& model, const Context& prompt,
                        std::span<const int> seq);

// Greedy: argmax with lowest-index tie-break. Otherwise one inverse-CDF draw
// from Rng(rng_seed).
int sample_token(const TabularLM& model, const Context& ctx,
                 std::uint64_t rng_seed, bool greedy);

// Lowest-index argmax over a probability vector.
int argmax_lowest(std::span<const double> values);

// Inverse-CDF lookup: smallest index with u < cumulative mass, skipping
// zero-probability entries.
int inverse_cdf_sample(const Distribution& dist, double u);

// Random teacher table: every logit i.i.d. normal(0, concentration^2).
// Deterministic in seed; higher concentration gives peakier rows.
TabularLM random_teacher(std::uint64_t seed, int order, const Vocab& vocab,
                         double concentration, int n_instructions);

// Random base-alphabet model with student-style augmented geometry is built
// by derive_student_init; this one gives a random *teacher-shaped* model,
// reused for synthetic students in tests via the same call.

// Expands the instruction axis by `copies`: new instruction i reads the rows
// of old instruction i / copies. Used to make a task-conditioned teacher
// blind to the budget-keyword component of the full instruction id.
TabularLM replicate_instructions(const TabularLM& model, int copies);

struct StudentInitConfig {
  int n_rollouts = 200;  // teacher rollouts per instruction for visitation
  int max_len = 32;
  std::uint64_t seed = 0;
};

// Capacity-limited student init: teacher conditionals marginalized over the
// truncated context positions, weighted by rollout-estimated visitation,
// then smoothed toward uniform. The result uses the augmented alphabet with
// shifted-context rows copied from their de-shifted windows, shifted action
// columns masked, and the <call-teacher> logit pinned low enough that its
// initial probability is below 1e-4 everywhere.
TabularLM derive_student_init(const TabularLM& teacher, int student_order,
                              double smoothing,
                              const StudentInitConfig& cfg = {});

// Base-alphabet variant of the same marginalization, used to initialize
// draft models for the speculative-decoding arm.
TabularLM derive_draft_init(const TabularLM& teacher, int draft_order,
                            double smoothing,
                            const StudentInitConfig& cfg = {});

// Random prompt prefix: uniform over base tokens excluding eos.
std::vector<int> random_prompt(const Vocab& vocab, int length, Rng& rng);

// Structured-text checkpoint format; load(dump(m)) reproduces m exactly.
std::string dump_model(const TabularLM& model);
TabularLM load_model(const std::string& text);

}  // namespace tandem
