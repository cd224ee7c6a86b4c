#pragma once

/**
 * PlanChain: a synthetic modular-arithmetic benchmark whose expert traces are
 * locally decodable, so an order-3 tabular student can represent them.
 *
 * A question fixes a presentation variant w, a plan length r and a start
 * value s; the task configures one modular operation (add d or mul d, values
 * mod `base`). The answer is the operation folded r times over s.
 *
 * Prompt:  [bos, VAR_w, OP, C_r, D_s, think]
 * Trace:   [C_r, D_s, C_{r-1}, D_{v_1}, ..., C_1, D_{v_{r-1}}, sep, D_{v_r}, eos]
 * with v_i = op^i(s). The leading pair restates the plan (operation count and
 * start value); every later decision depends only on the previous pair, which
 * is what concentrates the hard, question-specific predictions at the front
 * of the trace.
 *
 * The variant token is semantically inert and sits outside an order-3
 * context window. Distinct questions (different prompts) can therefore share
 * the content-bearing contexts, which is what lets a tabular student carry
 * training over to held-out questions - the desk-scale stand-in for new
 * problems sharing solution structure with the training set.
 *
 * The expert continuation is a total function of the full history: it applies
 * the local rules to whatever tokens are actually written, so it stays
 * defined (and deterministic) on off-path histories reached during sampling.
 */

#include "opd/policy.hpp"
#include "opd/rollout.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace opd {

// ============================================================================
// Questions and answers
// ============================================================================

struct Question {
  Prompt prompt;
  std::vector<TokenId> answer;  // reference tokens between answer_sep and eos
  std::string text;             // unique printable form, used by the splitter
};

/// Token span between the last answer_sep and the final eos; nullopt when the
/// sequence has no answer_sep or does not end with eos.
std::optional<std::vector<TokenId>> extract_answer(std::span<const TokenId> tokens,
                                                   const Vocabulary& vocab);

bool is_correct(const Trajectory& trajectory, const Question& question,
                const Vocabulary& vocab);

// ============================================================================
// PlanChain task
// ============================================================================

struct PlanChainOp {
  enum class Kind { add, mul };
  Kind kind = Kind::add;
  int operand = 3;
};

struct PlanChainConfig {
  int base = 10;      // digit tokens D_0..D_{base-1}; values are mod base
  int plan_max = 32;  // plan tokens C_1..C_plan_max
  int variants = 4;   // presentation tokens VAR_1..VAR_variants
  // Start values [0, reserved_starts) are held out of make_dataset and used
  // only for the execution-pretraining corpus (the "base model" analogue).
  int reserved_starts = 0;
  PlanChainOp op;
};

class PlanChainTask {
 public:
  explicit PlanChainTask(const PlanChainConfig& config);

  const Vocabulary& vocab() const { return vocab_; }
  const PlanChainConfig& config() const { return config_; }
  std::int64_t question_space() const;
  /// Longest expert trace: 2 * plan_max + 3 generated tokens.
  std::int64_t max_trace_len() const { return 2 * config_.plan_max + 3; }

  // Token layout.
  TokenId op_token() const;
  TokenId digit_token(int value) const;
  TokenId plan_token(int count) const;
  TokenId variant_token(int variant) const;
  bool is_digit(TokenId t) const;
  bool is_plan(TokenId t) const;
  int digit_value(TokenId t) const;
  int plan_value(TokenId t) const;

  int apply_op(int value) const;
  int fold_answer(int plan_len, int start) const;

  Question make_question(int variant, int plan_len, int start) const;
  std::vector<TokenId> expert_trace(int plan_len, int start) const;

  /// The local-rules continuation described above; total over all histories.
  ExpertFn expert() const;
  SmoothedExpertPolicy make_teacher(double epsilon) const;

  /// Full prompt+trace sequences over the reserved start values: training
  /// material for a base student that executes well but has never seen the
  /// experiment questions' plans.
  std::vector<std::vector<TokenId>> pretrain_corpus() const;

 private:
  PlanChainConfig config_;
  Vocabulary vocab_;
};

// ============================================================================
// Datasets
// ============================================================================

struct DatasetSplits {
  std::vector<Question> train, dev, test;
};

/// Deterministic disjoint splits over the question space.
DatasetSplits make_dataset(const PlanChainTask& task, int n_train, int n_dev, int n_test,
                           std::uint64_t seed);

// ============================================================================
// Off-policy corpus
// ============================================================================

struct CorpusRecord {
  Question question;
  Trajectory trajectory;  // sampler_logprobs are the generating teacher's
};

using OffPolicyCorpus = std::vector<CorpusRecord>;

OffPolicyCorpus build_offpolicy_corpus(const Policy& teacher,
                                       std::span<const Question> questions,
                                       int samples_per_question, std::int64_t cap,
                                       std::uint64_t seed);

void write_corpus_jsonl(std::ostream& out, const OffPolicyCorpus& corpus);
OffPolicyCorpus read_corpus_jsonl(std::istream& in);

}  // namespace opd
