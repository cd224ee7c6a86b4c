#pragma once

/**
 * Teacher-prefix continuation study.
 *
 * For each question the teacher produces one full rollout; truncated prefixes
 * of it are handed to the student, which continues to completion. The prefix
 * is clamped to min(requested, teacher_len - answer_margin) so the teacher's
 * final answer never leaks into the prefix.
 *
 * Continuation streams are keyed by (seed, question, sample) only - not by
 * the prefix length - so the zero-prefix arm reproduces acc_at_k exactly.
 */

#include "opd/rollout.hpp"
#include "opd/tasks.hpp"

#include <cstdint>
#include <vector>

namespace opd {

/// Mean over questions of the fraction of k sampled completions whose
/// extracted answer matches the reference.
double acc_at_k(const Policy& policy, std::span<const Question> questions, int k,
                std::int64_t cap, std::uint64_t seed, int workers = 1);

std::int64_t effective_prefix_length(std::int64_t requested, std::int64_t teacher_len,
                                     std::int64_t answer_margin);

struct ProbeConfig {
  std::vector<std::int64_t> prefix_lengths;
  std::int64_t answer_margin = 512;
  int samples_per_question = 16;
  std::int64_t cap = 0;  // teacher rollout and continuation budget
  std::uint64_t seed = 0;
};

struct ProbeResult {
  struct Row {
    std::int64_t requested = 0;
    double mean_effective = 0.0;
    double mean_accuracy = 0.0;
    std::int64_t question_count = 0;
  };
  struct QuestionDetail {
    std::size_t question_index = 0;
    std::int64_t teacher_len = 0;
    std::vector<std::int64_t> effective;  // one per requested prefix length
  };

  std::vector<Row> rows;                  // one per requested prefix length
  std::vector<QuestionDetail> details;    // probed questions only
  std::vector<std::size_t> skipped;       // teacher produced < answer_margin tokens
};

ProbeResult teacher_prefix_probe(const Policy& teacher, const Policy& student,
                                 std::span<const Question> questions,
                                 const ProbeConfig& config, int workers = 1);

}  // namespace opd
