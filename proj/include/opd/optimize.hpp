#pragma once

/**
 * Training loops.
 *
 * opd_step: sample B*K student rollouts capped at the schedule's current
 * L_train, score them against the teacher, take one Adam step on the
 * surrogate gradient, advance the schedule, accrue FLOP. A step is a barrier:
 * sampling for step s+1 never begins before the step-s update commits.
 *
 * seqkd_step: one Adam step on mean next-token NLL over teacher-generated
 * sequences, optionally truncated to the first `truncate_at` generated tokens.
 *
 * train() drives either method, evaluates dev accuracy on a fixed cadence,
 * writes step-indexed checkpoints and collects positional-loss bins when the
 * diagnostic flag is on (those score full-length rollouts regardless of the
 * gradient mask, which is what makes losses beyond the trained prefix
 * observable).
 */

#include "opd/analytics.hpp"
#include "opd/cost.hpp"
#include "opd/objective.hpp"
#include "opd/policy.hpp"
#include "opd/probe.hpp"
#include "opd/tasks.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace opd {

// ============================================================================
// Prefix schedule
// ============================================================================

struct PrefixSchedule {
  std::int64_t current = 1;
  std::int64_t delta = 0;
  std::int64_t cap = 0;
};

/// Clamped construction: current starts at min(l0, cap).
PrefixSchedule make_schedule(std::int64_t l0, std::int64_t delta, std::int64_t cap);

/// L' = min(L + delta, cap).
PrefixSchedule advance_schedule(const PrefixSchedule& schedule);

// ============================================================================
// Optimizer
// ============================================================================

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

class AdamState {
 public:
  AdamState(std::int64_t param_count, const AdamConfig& config);

  /// Dense decoupled-weight-decay Adam update over all parameters.
  void apply(std::vector<double>& params, const std::vector<double>& grad,
             double learning_rate);

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  std::int64_t step_ = 0;
};

// ============================================================================
// Step configuration and reports
// ============================================================================

struct TrainMask {
  bool follow_schedule = true;  // gradient mask = Prefix(L_train)
  MaskSpec spec;                // used when follow_schedule is false
};

struct TrainConfig {
  int batch_prompts = 32;       // B
  int samples_per_prompt = 4;   // K
  double learning_rate = 0.1;
  std::int64_t steps = 60;
  std::int64_t eval_every = 10;
  int eval_samples = 16;        // acc@k on the dev set
  std::int64_t eval_cap = 0;    // 0: use the schedule cap
  TrainMask mask;
  DivergenceConfig divergence;
  SamplingConfig sampling;      // temperature/top_p; seed comes from `seed`
  AdamConfig adam;
  std::uint64_t seed = 1;
  int workers = 1;
  bool diagnostics_bins = false;
  std::int64_t bin_width = 0;   // 0: max(1, eval_cap / 64)
};

struct StepReport {
  std::int64_t step = 0;
  double kl_estimate = 0.0;     // mean NLL for SeqKD steps
  std::int64_t l_train = 0;
  std::int64_t tokens_generated = 0;
  Flop flop_step = 0;
  double wall_ms = 0.0;         // kept out of result tables
};

struct EvalRecord {
  std::int64_t step = 0;
  double dev_accuracy = 0.0;
  std::string checkpoint_path;
};

struct TrainLog {
  std::vector<StepReport> steps;
  std::vector<EvalRecord> evals;
  CostReport cost;
  std::map<std::int64_t, PositionalBins> bins_by_step;
};

// ============================================================================
// Steps
// ============================================================================

StepReport opd_step(KGramPolicy& student, const Policy& teacher,
                    std::span<const Prompt> prompts, const TrainConfig& config,
                    PrefixSchedule& schedule, AdamState& optimizer, CostReport& cost,
                    const ModelCostSpec& student_cost, const ModelCostSpec& teacher_cost,
                    std::int64_t step_index, const OffPolicyCorpus* corpus = nullptr);

StepReport seqkd_step(KGramPolicy& student, std::span<const CorpusRecord> corpus_batch,
                      const TrainConfig& config, AdamState& optimizer, CostReport& cost,
                      const ModelCostSpec& student_cost, std::int64_t step_index,
                      std::optional<std::int64_t> truncate_at);

// ============================================================================
// Full runs
// ============================================================================

enum class TrainMethod { opd, seqkd };

struct RunSpec {
  TrainMethod method = TrainMethod::opd;
  KGramPolicy* student = nullptr;             // trained in place
  const Policy* teacher = nullptr;            // required for OPD
  std::span<const Question> train_questions;  // OPD prompt pool
  std::span<const Question> dev_questions;
  const OffPolicyCorpus* corpus = nullptr;    // SeqKD data / lambda < 1 mixing
  TrainConfig config;
  PrefixSchedule schedule;
  ModelCostSpec student_cost, teacher_cost;
  std::optional<std::int64_t> seqkd_truncate;
  std::string checkpoint_dir;                 // empty: keep no checkpoints
};

TrainLog train(const RunSpec& spec);

/// Index into `evals` of the best dev metric; ties break to the earliest step.
std::size_t select_best_checkpoint(std::span<const EvalRecord> evals);

}  // namespace opd
