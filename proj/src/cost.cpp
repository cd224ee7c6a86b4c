#include "opd/cost.hpp"

namespace opd {

namespace {

void check_model(const ModelCostSpec& model) {
  require(model.param_count > 0, Errc::invalid_argument,
          "model parameter count must be positive");
}

}  // namespace

Flop f_train(const ModelCostSpec& model, std::int64_t length) {
  check_model(model);
  require(length >= 0, Errc::invalid_argument, "sequence length must be >= 0");
  return Flop{6} * static_cast<Flop>(model.param_count) * static_cast<Flop>(length);
}

Flop f_fwd(const ModelCostSpec& model, std::int64_t length) {
  check_model(model);
  require(length >= 0, Errc::invalid_argument, "sequence length must be >= 0");
  return Flop{2} * static_cast<Flop>(model.param_count) * static_cast<Flop>(length);
}

Flop f_opd(const ModelCostSpec& student, const ModelCostSpec& teacher, std::int64_t length) {
  return f_train(student, length) + Flop{2} * f_fwd(student, length) +
         f_fwd(teacher, length);
}

Flop f_step(int batch_prompts, int samples_per_prompt, std::span<const std::int64_t> lengths,
            const ModelCostSpec& student, const ModelCostSpec& teacher) {
  require(batch_prompts >= 1 && samples_per_prompt >= 1, Errc::invalid_argument,
          "batch shape must be positive");
  const std::size_t expected =
      static_cast<std::size_t>(batch_prompts) * static_cast<std::size_t>(samples_per_prompt);
  require(lengths.size() == expected, Errc::invalid_argument,
          "expected " + std::to_string(expected) + " rollout lengths, got " +
              std::to_string(lengths.size()));
  Flop total = 0;
  for (std::int64_t l : lengths) total += f_opd(student, teacher, l);
  return total;
}

Flop f_seqkd_step(const ModelCostSpec& student, std::int64_t token_count) {
  return f_train(student, token_count);
}

const char* cost_category_name(CostCategory c) {
  switch (c) {
    case CostCategory::student_update: return "student_update";
    case CostCategory::student_sampling: return "student_sampling";
    case CostCategory::student_logprob: return "student_logprob";
    case CostCategory::teacher_logprob: return "teacher_logprob";
  }
  return "?";
}

void CostReport::add(std::int64_t step, CostCategory category, Flop flop) {
  entries.push_back(Entry{step, category, flop});
  cumulative[static_cast<int>(category)] += flop;
}

Flop CostReport::category_total(CostCategory category) const {
  return cumulative[static_cast<int>(category)];
}

Flop CostReport::total() const {
  Flop t = 0;
  for (int i = 0; i < kCostCategories; ++i) t += cumulative[i];
  return t;
}

}  // namespace opd
