#pragma once

/**
 * Sampled reverse-KL objective and its surrogate gradient.
 *
 * kl_estimate() averages per-trajectory masked sums of per-token log-ratios
 * log pi_s(x_t|ctx) - log pi_T(x_t|ctx) over the batch: token terms are summed
 * within a sequence, never length-normalized.
 *
 * surrogate_gradient() is the REINFORCE-style token-level form
 *     g = -(1/N) sum_i sum_t mask_t * w_t * A_t * grad log pi_s(x_t|ctx_t)
 * with A_t = log pi_T - log pi_s and w_t = exp(log pi_s - sampler logprob)
 * both held fixed (no gradient flows through them). Gradient accumulation
 * walks trajectories in batch order, so results are bit-reproducible.
 *
 * full_distribution_divergence() materializes whole next-token distributions
 * and mixes reverse/forward KL with beta; it exists for small vocabularies
 * where that is affordable.
 */

#include "opd/policy.hpp"
#include "opd/rollout.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace opd {

// ============================================================================
// Masks over generated-token positions (0-indexed from the first generated
// token).
// ============================================================================

struct MaskSpec {
  enum class Kind { full, prefix, window, tail };

  Kind kind = Kind::full;
  std::int64_t prefix_len = 0;   // prefix: [0, prefix_len)
  std::int64_t window_begin = 0; // window: [window_begin, window_end)
  std::int64_t window_end = 0;
  std::int64_t tail_len = 0;     // tail: last tail_len positions

  static MaskSpec Full() { return MaskSpec{}; }
  static MaskSpec Prefix(std::int64_t len);
  static MaskSpec Window(std::int64_t begin, std::int64_t end);
  static MaskSpec Tail(std::int64_t len);

  void validate() const;
  std::string label() const;
};

/// Per-position weights in {0, 1}; length == generated_len.
std::vector<double> apply_mask(std::int64_t generated_len, const MaskSpec& spec);

// ============================================================================
// Divergence configuration
// ============================================================================

enum class Estimator { sampled, full_distribution };

struct DivergenceConfig {
  double beta = 1.0;            // 1 = reverse KL, 0 = forward KL
  double lambda_onpolicy = 1.0; // 1 = student rollouts, 0 = off-policy corpus
  Estimator estimator = Estimator::sampled;

  void validate() const;
};

// ============================================================================
// Scoring
// ============================================================================

struct ScoredTrajectory {
  Trajectory base;
  std::vector<double> student_logprobs;
  std::vector<double> teacher_logprobs;
  std::vector<double> is_weights;  // exp(student - sampler), held fixed
  std::vector<double> advantages;  // teacher - student, held fixed
  std::vector<double> mask;        // 0/1 per generated position
};

/// Evaluates both policies on the trajectory's own contexts and fills the
/// per-token arrays. Policies must share a vocabulary.
ScoredTrajectory score_trajectory(const Policy& student, const Policy& teacher,
                                  const Trajectory& trajectory, const MaskSpec& mask);

/// Fast path for trajectories the current student itself sampled with raw
/// settings: student log-probs are the recorded sampler log-probs (bitwise
/// equal by the recording contract) and importance weights are exactly 1.
ScoredTrajectory score_trajectory_onpolicy(const Policy& student, const Policy& teacher,
                                           const Trajectory& trajectory,
                                           const MaskSpec& mask);

/// (1/N) sum_i sum_t mask * (student_logprob - teacher_logprob).
double kl_estimate(std::span<const ScoredTrajectory> batch);

SparseLogitGrad surrogate_gradient(const KGramPolicy& student,
                                   std::span<const ScoredTrajectory> batch);

// ============================================================================
// Full-distribution divergence (beta-mixed)
// ============================================================================

struct PerPositionDivergence {
  std::vector<double> values;  // masked per-position beta-mixed divergence
  SparseLogitGrad grad;        // exact per-position gradient, mask applied
};

PerPositionDivergence full_distribution_divergence(const KGramPolicy& student,
                                                   const Policy& teacher,
                                                   const Trajectory& trajectory,
                                                   const MaskSpec& mask, double beta);

/// Token-level loss dump for the analytics pipeline: one row per generated
/// token with (trajectory id, position, student lp, teacher lp, w, A, mask).
void write_token_records(std::ostream& out, std::span<const ScoredTrajectory> batch);

}  // namespace opd
