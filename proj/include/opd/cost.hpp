#pragma once

/**
 * Training-compute accounting.
 *
 * Parameter-dominated closed form: one training update on L tokens costs
 * 6*P*L FLOP and a forward pass costs exactly a third of that (2*P*L). A
 * per-rollout distillation step pays one student update plus three forward
 * passes: student sampling, student log-probs, teacher log-probs.
 *
 * All arithmetic is exact 128-bit integer math, so ratio identities
 * (train/fwd = 3, prefix savings L'/L) hold exactly, not approximately.
 */

#include "opd/errors.hpp"
#include "opd/table.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace opd {

struct ModelCostSpec {
  std::string label;          // "S" (student) or "T" (teacher)
  std::int64_t param_count = 0;
};

/// One training update (forward + backward + optimizer) on L tokens: 6*P*L.
Flop f_train(const ModelCostSpec& model, std::int64_t length);

/// Forward-only pass: f_train / 3 exactly, i.e. 2*P*L.
Flop f_fwd(const ModelCostSpec& model, std::int64_t length);

/// Per-rollout distillation cost:
/// f_train(S, L) + 2*f_fwd(S, L) + f_fwd(T, L).
Flop f_opd(const ModelCostSpec& student, const ModelCostSpec& teacher, std::int64_t length);

/// Per-step cost over B*K rollouts with individual supervised lengths.
/// Reduces to B*K*f_opd(L) when all lengths equal L.
Flop f_step(int batch_prompts, int samples_per_prompt, std::span<const std::int64_t> lengths,
            const ModelCostSpec& student, const ModelCostSpec& teacher);

/// One SFT step on `token_count` supervised tokens: f_train(S, tokens).
Flop f_seqkd_step(const ModelCostSpec& student, std::int64_t token_count);

// ============================================================================
// Accumulated report
// ============================================================================

enum class CostCategory : int {
  student_update = 0,
  student_sampling = 1,
  student_logprob = 2,
  teacher_logprob = 3,
};

constexpr int kCostCategories = 4;

const char* cost_category_name(CostCategory c);

struct CostReport {
  struct Entry {
    std::int64_t step;
    CostCategory category;
    Flop flop;
  };

  std::vector<Entry> entries;
  Flop cumulative[kCostCategories] = {0, 0, 0, 0};

  void add(std::int64_t step, CostCategory category, Flop flop);
  Flop category_total(CostCategory category) const;
  Flop total() const;
};

}  // namespace opd
