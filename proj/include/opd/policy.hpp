#pragma once

/**
 * Autoregressive token policies with exact log-probabilities.
 *
 * Two concrete families:
 *  - KGramPolicy: tabular softmax over order-k contexts. Exact gradients,
 *    enumerable, checkpointable. Used for students and (optionally) teachers.
 *  - SmoothedExpertPolicy: a deterministic next-token expert mixed with
 *    epsilon/V uniform mass, so every token keeps positive probability and
 *    reverse KL against it stays finite.
 *
 * Policies are immutable for readers; the optimizer is the only writer and
 * mutates a KGramPolicy between rollout phases.
 */

#include "opd/errors.hpp"
#include "opd/rng.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace opd {

using TokenId = std::int32_t;

struct Vocabulary {
  std::int32_t size = 0;
  TokenId bos = 0;
  TokenId eos = 1;
  TokenId think = 2;
  TokenId answer_sep = 3;

  void validate() const;
  bool operator==(const Vocabulary&) const = default;
};

// ============================================================================
// Policy interface
// ============================================================================

class Policy {
 public:
  virtual ~Policy() = default;

  virtual const Vocabulary& vocab() const = 0;

  /// Exact conditional distribution over the next token. `history` must begin
  /// with bos and contain only in-range ids; entries are positive and sum to 1.
  virtual std::vector<double> next_distribution(std::span<const TokenId> history) const = 0;

  /// Allocation-free variant; `out` must hold vocab().size entries.
  virtual void next_distribution_into(std::span<const TokenId> history,
                                      std::span<double> out) const;

  /// log of next_distribution(history)[next].
  virtual double log_prob(std::span<const TokenId> history, TokenId next) const;

 protected:
  void check_history(std::span<const TokenId> history) const;
};

// ============================================================================
// Sparse gradients over the logit table
// ============================================================================

/// Gradient of log_prob w.r.t. one context row of a KGramPolicy:
/// onehot(next) - softmax(row).
struct RowGrad {
  std::int64_t row = 0;
  std::vector<double> values;
};

/// Accumulated gradient touching a subset of rows. Rows are kept ordered so
/// applying the gradient is reproducible independent of how it was built.
struct SparseLogitGrad {
  std::int32_t vocab_size = 0;
  std::map<std::int64_t, std::vector<double>> rows;

  void add_scaled(std::int64_t row, std::span<const double> values, double scale);
  void scale(double factor);
  /// Flattens into a dense table of `row_count * vocab_size` entries.
  std::vector<double> dense(std::int64_t row_count) const;
  /// Reuses `out` as the dense table (resized and zeroed).
  void dense_into(std::int64_t row_count, std::vector<double>& out) const;
};

// ============================================================================
// KGramPolicy
// ============================================================================

class KGramPolicy final : public Policy {
 public:
  /// Zero logits: uniform next-token distribution for every context.
  KGramPolicy(const Vocabulary& vocab, int order);
  KGramPolicy(const Vocabulary& vocab, int order, std::vector<double> logits);

  /// Gaussian logits, deterministic in `seed`.
  static KGramPolicy random(const Vocabulary& vocab, int order, double stddev,
                            std::uint64_t seed);

  const Vocabulary& vocab() const override { return vocab_; }
  int order() const { return order_; }
  std::int64_t row_count() const { return rows_; }
  std::int64_t param_count() const { return static_cast<std::int64_t>(logits_.size()); }

  /// Base-V encoding of the last `order` tokens of `history`, left-padded
  /// with bos when the history is shorter than the order.
  std::int64_t context_index(std::span<const TokenId> history) const;

  std::span<const double> row(std::int64_t context) const;
  std::vector<double> row_softmax(std::int64_t context) const;

  std::vector<double> next_distribution(std::span<const TokenId> history) const override;
  void next_distribution_into(std::span<const TokenId> history,
                              std::span<double> out) const override;
  double log_prob(std::span<const TokenId> history, TokenId next) const override;

  RowGrad grad_log_prob(std::span<const TokenId> history, TokenId next) const;

  // Single-writer mutation points for the optimizer / fit_mle.
  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }

  void save(const std::string& path) const;
  static KGramPolicy load(const std::string& path);

 private:
  Vocabulary vocab_;
  int order_ = 1;
  std::int64_t rows_ = 0;
  std::vector<double> logits_;  // rows_ x V, row-major by context index
};

// ============================================================================
// SmoothedExpertPolicy
// ============================================================================

using ExpertFn = std::function<TokenId(std::span<const TokenId>)>;

class SmoothedExpertPolicy final : public Policy {
 public:
  /// expert(history) must return an in-range token for every valid history.
  SmoothedExpertPolicy(const Vocabulary& vocab, ExpertFn expert, double epsilon);

  const Vocabulary& vocab() const override { return vocab_; }
  double epsilon() const { return epsilon_; }
  TokenId expert_token(std::span<const TokenId> history) const;

  std::vector<double> next_distribution(std::span<const TokenId> history) const override;
  void next_distribution_into(std::span<const TokenId> history,
                              std::span<double> out) const override;
  double log_prob(std::span<const TokenId> history, TokenId next) const override;

 private:
  Vocabulary vocab_;
  ExpertFn expert_;
  double epsilon_;
};

// ============================================================================
// Free functions
// ============================================================================

/// Polymorphic entry point; throws unsupported-policy for non-tabular kinds.
RowGrad grad_log_prob(const Policy& policy, std::span<const TokenId> history,
                      TokenId next);

/// Plain gradient descent on mean next-token negative log-likelihood over the
/// corpus (positions 1..len-1 of each sequence). Returns the trained copy.
KGramPolicy fit_mle(const KGramPolicy& init,
                    std::span<const std::vector<TokenId>> corpus, int steps,
                    double learning_rate);

/// Mean per-token negative log-likelihood of the corpus under the policy.
double corpus_nll(const Policy& policy, std::span<const std::vector<TokenId>> corpus);

// Numerics shared with the objective/oracle modules.
double log_sum_exp(std::span<const double> values);
void softmax_into(std::span<const double> logits, std::span<double> out);
/// Single-pass softmax that also returns log(sum exp(logits)); bitwise equal
/// to log_sum_exp on the same input.
double softmax_lse_into(std::span<const double> logits, std::span<double> out);

}  // namespace opd
