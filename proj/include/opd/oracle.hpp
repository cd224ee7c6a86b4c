#pragma once

/**
 * Brute-force enumeration oracles for tiny instances.
 *
 * enumerate_kl walks every generation outcome up to the cap (eos absorbing;
 * cap-hitting outcomes count with their partial masked sums) and returns the
 * exact expectation that the sampled estimator targets. Zero-probability
 * branches contribute nothing and are skipped. Traversal is depth-first in
 * token order, so the summation order is fixed.
 *
 * These functions are the ground truth the estimator and gradient tests gate
 * against; they share nothing with the sampled code paths beyond the policy
 * interface.
 */

#include "opd/objective.hpp"
#include "opd/policy.hpp"
#include "opd/rollout.hpp"

#include <cstdint>
#include <vector>

namespace opd {

struct EnumerationBudget {
  std::int64_t max_len = 0;
  std::int32_t vocab_size = 0;

  /// sum over l <= max_len of V^l; saturates instead of overflowing.
  std::int64_t state_count_bound() const;
  /// Throws budget-exceeded beyond the 1e7 hard guard.
  void check() const;
};

/// Exact truncated-horizon reverse KL:
/// sum over outcomes of P_student(outcome) * (masked sum of log-ratios).
double enumerate_kl(const Policy& student, const Policy& teacher, const Prompt& prompt,
                    std::int64_t cap, const MaskSpec& mask);

/// Central finite differences of enumerate_kl over every student logit.
std::vector<double> enumerate_kl_gradient(const KGramPolicy& student, const Policy& teacher,
                                          const Prompt& prompt, std::int64_t cap,
                                          const MaskSpec& mask, double h = 1e-5);

struct Question;  // tasks.hpp

/// Total probability mass of outcomes whose extracted answer is correct.
double exact_accuracy(const Policy& policy, const Question& question, std::int64_t cap);

/// Sanity handle for tests: total probability of all enumerated outcomes.
double enumerate_total_probability(const Policy& policy, const Prompt& prompt,
                                   std::int64_t cap);

}  // namespace opd
