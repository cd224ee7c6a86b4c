#include "opd/oracle.hpp"

#include "opd/tasks.hpp"

#include <cmath>

namespace opd {

std::int64_t EnumerationBudget::state_count_bound() const {
  constexpr std::int64_t limit = std::int64_t{1} << 60;
  std::int64_t total = 0;
  std::int64_t level = 1;
  for (std::int64_t l = 0; l <= max_len; ++l) {
    total += level;
    if (total >= limit) return limit;
    if (level > limit / vocab_size) return limit;
    level *= vocab_size;
  }
  return total;
}

void EnumerationBudget::check() const {
  require(max_len >= 0, Errc::invalid_argument, "max_len must be >= 0");
  require(vocab_size >= 1, Errc::invalid_argument, "vocab_size must be >= 1");
  const std::int64_t bound = state_count_bound();
  require(bound <= 10'000'000, Errc::budget_exceeded,
          "enumeration would touch ~" + std::to_string(bound) +
              " states; the guard allows at most 1e7");
}

namespace {

// Depth-first walk over all generation outcomes in token order. `visit` is
// called once per terminal outcome (eos emitted or cap reached) with the
// outcome probability; `step_term` supplies the per-token summand.
template <typename StepTerm, typename Visit>
void walk_outcomes(const Policy& policy, std::vector<TokenId>& history, std::int64_t depth,
                   std::int64_t cap, double prob, double partial, const StepTerm& step_term,
                   const Visit& visit) {
  if (depth == cap) {
    visit(prob, partial, history, /*ended_with_eos=*/false);
    return;
  }
  const std::vector<double> dist = policy.next_distribution(history);
  const TokenId eos = policy.vocab().eos;
  for (TokenId x = 0; x < policy.vocab().size; ++x) {
    const double p = dist[static_cast<std::size_t>(x)];
    if (p <= 0.0) continue;  // zero-probability branches contribute nothing
    const double term = step_term(history, x, depth);
    history.push_back(x);
    if (x == eos) {
      visit(prob * p, partial + term, history, /*ended_with_eos=*/true);
    } else {
      walk_outcomes(policy, history, depth + 1, cap, prob * p, partial + term, step_term,
                    visit);
    }
    history.pop_back();
  }
}

}  // namespace

double enumerate_kl(const Policy& student, const Policy& teacher, const Prompt& prompt,
                    std::int64_t cap, const MaskSpec& mask) {
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");
  prompt.validate(student.vocab());
  EnumerationBudget{cap, student.vocab().size}.check();
  const std::vector<double> weights = apply_mask(cap, mask);

  double total = 0.0;
  std::vector<TokenId> history = prompt.tokens;
  walk_outcomes(
      student, history, 0, cap, 1.0, 0.0,
      [&](std::span<const TokenId> h, TokenId x, std::int64_t depth) -> double {
        if (weights[static_cast<std::size_t>(depth)] == 0.0) return 0.0;
        return student.log_prob(h, x) - teacher.log_prob(h, x);
      },
      [&](double prob, double partial, std::span<const TokenId>, bool) {
        total += prob * partial;
      });
  return total;
}

std::vector<double> enumerate_kl_gradient(const KGramPolicy& student, const Policy& teacher,
                                          const Prompt& prompt, std::int64_t cap,
                                          const MaskSpec& mask, double h) {
  require(h > 0.0, Errc::invalid_argument, "finite-difference step must be positive");
  KGramPolicy probe = student;
  std::vector<double>& logits = probe.logits();
  std::vector<double> grad(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double saved = logits[i];
    logits[i] = saved + h;
    const double plus = enumerate_kl(probe, teacher, prompt, cap, mask);
    logits[i] = saved - h;
    const double minus = enumerate_kl(probe, teacher, prompt, cap, mask);
    logits[i] = saved;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

double exact_accuracy(const Policy& policy, const Question& question, std::int64_t cap) {
  require(!question.answer.empty(), Errc::invalid_data,
          "question carries no reference answer");
  question.prompt.validate(policy.vocab());
  EnumerationBudget{cap, policy.vocab().size}.check();

  double correct = 0.0;
  std::vector<TokenId> history = question.prompt.tokens;
  walk_outcomes(
      policy, history, 0, cap, 1.0, 0.0,
      [](std::span<const TokenId>, TokenId, std::int64_t) { return 0.0; },
      [&](double prob, double, std::span<const TokenId> tokens, bool ended_with_eos) {
        if (!ended_with_eos) return;  // no eos: unparseable, counts wrong
        const auto answer = extract_answer(tokens, policy.vocab());
        if (answer && *answer == question.answer) correct += prob;
      });
  return correct;
}

double enumerate_total_probability(const Policy& policy, const Prompt& prompt,
                                   std::int64_t cap) {
  prompt.validate(policy.vocab());
  EnumerationBudget{cap, policy.vocab().size}.check();
  double total = 0.0;
  std::vector<TokenId> history = prompt.tokens;
  walk_outcomes(
      policy, history, 0, cap, 1.0, 0.0,
      [](std::span<const TokenId>, TokenId, std::int64_t) { return 0.0; },
      [&](double prob, double, std::span<const TokenId>, bool) { total += prob; });
  return total;
}

}  // namespace opd
