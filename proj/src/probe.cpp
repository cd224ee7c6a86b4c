#include "opd/probe.hpp"

#include <algorithm>
#include <thread>

namespace opd {

namespace {

double question_accuracy(const Policy& policy, const Question& question,
                         std::span<const TokenId> prefix, int k, std::int64_t cap,
                         std::uint64_t seed, std::size_t question_index) {
  require(!question.answer.empty(), Errc::invalid_data,
          "question carries no reference answer");
  SamplingConfig cfg;  // raw sampling, per evaluation convention
  int correct = 0;
  for (int j = 0; j < k; ++j) {
    Rng rng(derive_seed(seed, {stream::acc_at_k, static_cast<std::uint64_t>(question_index),
                               static_cast<std::uint64_t>(j)}));
    const Trajectory traj =
        continue_from_prefix(policy, question.prompt, prefix, cap, cfg, rng);
    if (is_correct(traj, question, policy.vocab())) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(k);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t w = 0; w < n_threads; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t i = w; i < n; i += n_threads) body(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace

double acc_at_k(const Policy& policy, std::span<const Question> questions, int k,
                std::int64_t cap, std::uint64_t seed, int workers) {
  require(!questions.empty(), Errc::empty_input, "no questions to evaluate");
  require(k >= 1, Errc::invalid_argument, "k must be >= 1");
  std::vector<double> acc(questions.size(), 0.0);
  parallel_for(questions.size(), workers, [&](std::size_t qi) {
    acc[qi] = question_accuracy(policy, questions[qi], {}, k, cap, seed, qi);
  });
  double total = 0.0;
  for (double a : acc) total += a;
  return total / static_cast<double>(questions.size());
}

std::int64_t effective_prefix_length(std::int64_t requested, std::int64_t teacher_len,
                                     std::int64_t answer_margin) {
  require(requested >= 0, Errc::invalid_argument, "requested prefix must be >= 0");
  require(answer_margin >= 0, Errc::invalid_argument, "answer margin must be >= 0");
  require(teacher_len >= answer_margin, Errc::invalid_argument,
          "teacher response shorter than the answer margin");
  return std::min(requested, teacher_len - answer_margin);
}

ProbeResult teacher_prefix_probe(const Policy& teacher, const Policy& student,
                                 std::span<const Question> questions,
                                 const ProbeConfig& config, int workers) {
  require(!questions.empty(), Errc::empty_input, "no questions to probe");
  require(!config.prefix_lengths.empty(), Errc::invalid_argument,
          "no prefix lengths requested");
  require(config.samples_per_question >= 1, Errc::invalid_argument, "k must be >= 1");
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");

  // One teacher rollout per question.
  std::vector<Trajectory> teacher_rollouts(questions.size());
  parallel_for(questions.size(), workers, [&](std::size_t qi) {
    SamplingConfig cfg;
    Rng rng(derive_seed(config.seed, {stream::probe, static_cast<std::uint64_t>(qi)}));
    teacher_rollouts[qi] = generate(teacher, questions[qi].prompt, config.cap, cfg, rng);
  });

  ProbeResult result;
  std::vector<std::size_t> probed;
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    if (teacher_rollouts[qi].generated_len() < config.answer_margin) {
      result.skipped.push_back(qi);
    } else {
      probed.push_back(qi);
    }
  }
  require(!probed.empty(), Errc::empty_input,
          "every question was skipped: teacher responses shorter than the answer margin");

  for (const std::size_t qi : probed) {
    ProbeResult::QuestionDetail detail;
    detail.question_index = qi;
    detail.teacher_len = teacher_rollouts[qi].generated_len();
    for (const std::int64_t requested : config.prefix_lengths) {
      detail.effective.push_back(
          effective_prefix_length(requested, detail.teacher_len, config.answer_margin));
    }
    result.details.push_back(std::move(detail));
  }

  for (std::size_t li = 0; li < config.prefix_lengths.size(); ++li) {
    ProbeResult::Row row;
    row.requested = config.prefix_lengths[li];
    row.question_count = static_cast<std::int64_t>(probed.size());
    std::vector<double> acc(probed.size(), 0.0);
    parallel_for(probed.size(), workers, [&](std::size_t pi) {
      const std::size_t qi = probed[pi];
      const std::int64_t eff = result.details[pi].effective[li];
      const std::span<const TokenId> prefix =
          teacher_rollouts[qi].generated().subspan(0, static_cast<std::size_t>(eff));
      acc[pi] = question_accuracy(student, questions[qi], prefix,
                                  config.samples_per_question, config.cap, config.seed, qi);
    });
    double acc_sum = 0.0;
    double eff_sum = 0.0;
    for (std::size_t pi = 0; pi < probed.size(); ++pi) {
      acc_sum += acc[pi];
      eff_sum += static_cast<double>(result.details[pi].effective[li]);
    }
    row.mean_accuracy = acc_sum / static_cast<double>(probed.size());
    row.mean_effective = eff_sum / static_cast<double>(probed.size());
    result.rows.push_back(row);
  }
  return result;
}

}  // namespace opd
