#include "opd/probe.hpp"

#include "opd/oracle.hpp"

#include <doctest.h>

#include <cmath>

using namespace opd;

namespace {

PlanChainTask probe_task() {
  PlanChainConfig tc;
  tc.base = 4;
  tc.plan_max = 10;
  tc.variants = 3;
  tc.reserved_starts = 1;
  tc.op = {PlanChainOp::Kind::add, 3};
  return PlanChainTask(tc);
}

}  // namespace

TEST_CASE("clamp arithmetic matches the paper-scale examples") {
  CHECK(effective_prefix_length(8192, 15000, 512) == 8192);
  CHECK(effective_prefix_length(8192, 6000, 512) == 5488);
  CHECK(effective_prefix_length(0, 6000, 512) == 0);
  CHECK_THROWS_AS(effective_prefix_length(10, 100, 512), OpdError);
}

TEST_CASE("acc_at_k: a near-deterministic correct policy scores 1") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 10, 5, 5, 4);
  const SmoothedExpertPolicy sharp = task.make_teacher(1e-12);
  CHECK(acc_at_k(sharp, data.dev, 4, 30, 5) == doctest::Approx(1.0));
}

TEST_CASE("acc_at_k: a policy that never emits the separator scores 0") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 10, 5, 5, 4);
  const Vocabulary& v = task.vocab();
  // loops on a digit token, never sep, never eos until the cap
  SmoothedExpertPolicy stubborn(
      v, [&](std::span<const TokenId>) { return task.digit_token(1); }, 1e-12);
  CHECK(acc_at_k(stubborn, data.dev, 4, 20, 5) == doctest::Approx(0.0));
}

TEST_CASE("acc_at_k input validation") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 10, 5, 5, 4);
  const SmoothedExpertPolicy p = task.make_teacher(0.1);
  const std::vector<Question> empty;
  CHECK_THROWS_AS(acc_at_k(p, empty, 4, 20, 5), OpdError);

  std::vector<Question> no_answer = {data.dev[0]};
  no_answer[0].answer.clear();
  try {
    acc_at_k(p, no_answer, 4, 20, 5);
    FAIL("expected invalid-data");
  } catch (const OpdError& e) {
    CHECK(e.code() == Errc::invalid_data);
  }
}

TEST_CASE("acc_at_k matches the enumeration oracle within binomial bounds") {
  PlanChainConfig tc;
  tc.base = 2;
  tc.plan_max = 1;
  tc.variants = 2;
  tc.op = {PlanChainOp::Kind::add, 1};
  const PlanChainTask task(tc);
  const SmoothedExpertPolicy teacher = task.make_teacher(0.05);
  std::vector<Question> questions;
  for (int variant = 1; variant <= 2; ++variant) {
    for (int s = 0; s < 2; ++s) questions.push_back(task.make_question(variant, 1, s));
  }
  double exact = 0.0;
  for (const Question& q : questions) exact += exact_accuracy(teacher, q, 6);
  exact /= static_cast<double>(questions.size());

  const int k = 16;
  const double sim = acc_at_k(teacher, questions, k, 6, 99);
  const double n = static_cast<double>(k * questions.size());
  const double sigma = std::sqrt(exact * (1.0 - exact) / n);
  CHECK(std::abs(sim - exact) <= 3.0 * sigma);
}

TEST_CASE("probe: clamp rule holds exactly for every probed question") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 20, 10, 10, 6);
  const SmoothedExpertPolicy teacher = task.make_teacher(0.02);
  const SmoothedExpertPolicy student = task.make_teacher(0.3);

  ProbeConfig pc;
  pc.prefix_lengths = {0, 2, 4, 8, 100};
  pc.answer_margin = 3;
  pc.samples_per_question = 4;
  pc.cap = 30;
  pc.seed = 41;
  const ProbeResult result = teacher_prefix_probe(teacher, student, data.dev, pc);

  REQUIRE(result.rows.size() == pc.prefix_lengths.size());
  for (const auto& detail : result.details) {
    for (std::size_t li = 0; li < pc.prefix_lengths.size(); ++li) {
      CHECK(detail.effective[li] ==
            std::min(pc.prefix_lengths[li], detail.teacher_len - pc.answer_margin));
      CHECK(detail.effective[li] >= 0);
      CHECK(detail.effective[li] <= pc.prefix_lengths[li]);
    }
  }
}

TEST_CASE("probe: zero prefix equals the unassisted accuracy exactly") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 20, 10, 10, 6);
  const SmoothedExpertPolicy teacher = task.make_teacher(0.02);
  const SmoothedExpertPolicy student = task.make_teacher(0.4);

  ProbeConfig pc;
  pc.prefix_lengths = {0, 6};
  pc.answer_margin = 3;
  pc.samples_per_question = 8;
  pc.cap = 30;
  pc.seed = 43;
  const ProbeResult result = teacher_prefix_probe(teacher, student, data.dev, pc);
  const double unassisted = acc_at_k(student, data.dev, 8, 30, 43);
  CHECK(result.rows[0].mean_accuracy == unassisted);
}

TEST_CASE("probe: student == teacher accuracy is flat up to sampling noise") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 20, 10, 10, 6);
  const SmoothedExpertPolicy teacher = task.make_teacher(0.05);

  ProbeConfig pc;
  pc.prefix_lengths = {0, 4, 8, 16};
  pc.answer_margin = 3;
  pc.samples_per_question = 32;
  pc.cap = 30;
  pc.seed = 47;
  const ProbeResult result = teacher_prefix_probe(teacher, teacher, data.dev, pc);
  // same-distribution continuation: spreads stay within a few binomial sigma
  const double n = 32.0 * static_cast<double>(result.rows[0].question_count);
  const double p = result.rows[0].mean_accuracy;
  const double sigma = std::sqrt(std::max(p * (1 - p), 0.05) / n);
  for (const auto& row : result.rows) {
    CHECK(std::abs(row.mean_accuracy - p) <= 5.0 * sigma + 1e-12);
  }
}

TEST_CASE("probe: full expert prefix helps at least as much as none") {
  const PlanChainTask task = probe_task();
  const DatasetSplits data = make_dataset(task, 20, 10, 10, 6);
  const SmoothedExpertPolicy teacher = task.make_teacher(0.01);
  KGramPolicy student(task.vocab(), 3);
  student = fit_mle(student, task.pretrain_corpus(), 300, 30.0);

  ProbeConfig pc;
  pc.prefix_lengths = {0, 1000};  // 1000 clamps to teacher_len - margin
  pc.answer_margin = 3;
  pc.samples_per_question = 8;
  pc.cap = 30;
  pc.seed = 53;
  const ProbeResult result = teacher_prefix_probe(teacher, student, data.dev, pc);
  CHECK(result.rows[1].mean_accuracy >= result.rows[0].mean_accuracy);
  CHECK(result.rows[1].mean_accuracy > 0.3);  // execution-pretrained student finishes
}

TEST_CASE("probe skips questions whose teacher response is too short") {
  const PlanChainTask task = probe_task();
  const Vocabulary& v = task.vocab();
  // teacher that stops immediately: every generated response has length 1
  SmoothedExpertPolicy terse(v, [&](std::span<const TokenId>) { return v.eos; }, 1e-9);
  const DatasetSplits data = make_dataset(task, 10, 5, 5, 6);
  ProbeConfig pc;
  pc.prefix_lengths = {0, 4};
  pc.answer_margin = 3;
  pc.samples_per_question = 2;
  pc.cap = 20;
  pc.seed = 57;
  try {
    teacher_prefix_probe(terse, terse, data.dev, pc);
    FAIL("expected empty-input: every question skipped");
  } catch (const OpdError& e) {
    CHECK(e.code() == Errc::empty_input);
  }
}
