#include "opd/optimize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <thread>

namespace opd {

// ============================================================================
// Schedule
// ============================================================================

PrefixSchedule make_schedule(std::int64_t l0, std::int64_t delta, std::int64_t cap) {
  require(l0 >= 0, Errc::invalid_argument, "schedule start must be >= 0");
  require(delta >= 0, Errc::invalid_argument, "schedule delta must be >= 0");
  require(cap >= 0, Errc::invalid_argument, "schedule cap must be >= 0");
  return PrefixSchedule{std::min(l0, cap), delta, cap};
}

PrefixSchedule advance_schedule(const PrefixSchedule& schedule) {
  PrefixSchedule next = schedule;
  next.current = std::min(schedule.current + schedule.delta, schedule.cap);
  return next;
}

// ============================================================================
// Adam
// ============================================================================

AdamState::AdamState(std::int64_t param_count, const AdamConfig& config)
    : config_(config),
      m_(static_cast<std::size_t>(param_count), 0.0),
      v_(static_cast<std::size_t>(param_count), 0.0) {
  require(param_count > 0, Errc::invalid_argument, "parameter count must be positive");
  require(config_.beta1 >= 0.0 && config_.beta1 < 1.0, Errc::invalid_argument,
          "beta1 must lie in [0, 1)");
  require(config_.beta2 >= 0.0 && config_.beta2 < 1.0, Errc::invalid_argument,
          "beta2 must lie in [0, 1)");
  require(config_.epsilon > 0.0, Errc::invalid_argument, "epsilon must be positive");
}

void AdamState::apply(std::vector<double>& params, const std::vector<double>& grad,
                      double learning_rate) {
  require(params.size() == m_.size() && grad.size() == m_.size(), Errc::invalid_argument,
          "parameter/gradient size mismatch");
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
    const double m_hat = m_[i] / bc1;
    const double v_hat = v_[i] / bc2;
    const double update = m_hat / (std::sqrt(v_hat) + config_.epsilon) +
                          config_.weight_decay * params[i];
    params[i] -= learning_rate * update;
  }
}

// ============================================================================
// OPD step
// ============================================================================

namespace {

std::int64_t effective_eval_cap(const TrainConfig& config, const PrefixSchedule& schedule) {
  return config.eval_cap > 0 ? config.eval_cap : schedule.cap;
}

std::int64_t effective_bin_width(const TrainConfig& config, std::int64_t eval_cap) {
  if (config.bin_width > 0) return config.bin_width;
  return std::max<std::int64_t>(1, eval_cap / 64);
}

struct ScoredBatch {
  std::vector<ScoredTrajectory> scored;
  std::int64_t tokens = 0;
};

ScoredBatch score_batch(const KGramPolicy& student, const Policy& teacher,
                        std::span<const Trajectory> trajectories, const MaskSpec& mask,
                        int workers, const std::vector<bool>* from_corpus = nullptr,
                        bool raw_sampling = false) {
  ScoredBatch out;
  out.scored.resize(trajectories.size());
  auto run = [&](std::size_t i) {
    const bool onpolicy = raw_sampling && (from_corpus == nullptr || !(*from_corpus)[i]);
    out.scored[i] = onpolicy
                        ? score_trajectory_onpolicy(student, teacher, trajectories[i], mask)
                        : score_trajectory(student, teacher, trajectories[i], mask);
  };
  if (workers <= 1 || trajectories.size() <= 1) {
    for (std::size_t i = 0; i < trajectories.size(); ++i) run(i);
  } else {
    const std::size_t n_threads =
        std::min<std::size_t>(static_cast<std::size_t>(workers), trajectories.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t i = w; i < trajectories.size(); i += n_threads) run(i);
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (const ScoredTrajectory& s : out.scored) out.tokens += s.base.generated_len();
  return out;
}

}  // namespace

StepReport opd_step(KGramPolicy& student, const Policy& teacher,
                    std::span<const Prompt> prompts, const TrainConfig& config,
                    PrefixSchedule& schedule, AdamState& optimizer, CostReport& cost,
                    const ModelCostSpec& student_cost, const ModelCostSpec& teacher_cost,
                    std::int64_t step_index, const OffPolicyCorpus* corpus) {
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");
  config.divergence.validate();
  const auto t0 = std::chrono::steady_clock::now();

  const std::int64_t l_train = schedule.current;
  const int k = config.samples_per_prompt;
  const std::size_t total = prompts.size() * static_cast<std::size_t>(k);
  const double lambda = config.divergence.lambda_onpolicy;

  SamplingConfig sampling = config.sampling;
  sampling.seed = derive_seed(config.seed, {stream::rollout, static_cast<std::uint64_t>(step_index)});

  std::vector<Trajectory> trajectories;
  std::vector<bool> from_corpus(total, false);
  if (lambda >= 1.0) {
    trajectories = generate_batch(student, prompts, k, l_train, sampling, config.workers);
  } else {
    require(corpus != nullptr && !corpus->empty(), Errc::empty_input,
            "lambda < 1 requires an off-policy corpus");
    trajectories.resize(total);
    for (std::size_t slot = 0; slot < total; ++slot) {
      Rng mix(derive_seed(config.seed, {stream::lambda_mix,
                                        static_cast<std::uint64_t>(step_index),
                                        static_cast<std::uint64_t>(slot)}));
      if (mix.next_unit() < lambda) {
        const std::size_t p = slot / static_cast<std::size_t>(k);
        const std::size_t kk = slot % static_cast<std::size_t>(k);
        Rng rng(derive_seed(sampling.seed, {static_cast<std::uint64_t>(p),
                                            static_cast<std::uint64_t>(kk)}));
        trajectories[slot] = generate(student, prompts[p], l_train, sampling, rng);
      } else {
        from_corpus[slot] = true;
        trajectories[slot] = (*corpus)[mix.next_u64() % corpus->size()].trajectory;
      }
    }
  }

  const MaskSpec mask =
      config.mask.follow_schedule ? MaskSpec::Prefix(l_train) : config.mask.spec;
  const bool raw_sampling = config.sampling.temperature == 1.0 && config.sampling.top_p == 1.0;
  ScoredBatch batch = score_batch(student, teacher, trajectories, mask, config.workers,
                                  &from_corpus, raw_sampling);

  double loss = 0.0;
  SparseLogitGrad grad;
  if (config.divergence.estimator == Estimator::sampled) {
    loss = kl_estimate(batch.scored);
    grad = surrogate_gradient(student, batch.scored);
  } else {
    grad.vocab_size = student.vocab().size;
    const double inv_n = 1.0 / static_cast<double>(trajectories.size());
    for (const Trajectory& traj : trajectories) {
      PerPositionDivergence d = full_distribution_divergence(
          student, teacher, traj, mask, config.divergence.beta);
      for (double v : d.values) loss += v;
      for (const auto& [row, values] : d.grad.rows) grad.add_scaled(row, values, inv_n);
    }
    loss *= inv_n;
  }

  static thread_local std::vector<double> dense_scratch;
  grad.dense_into(student.row_count(), dense_scratch);
  optimizer.apply(student.logits(), dense_scratch, config.learning_rate);
  schedule = advance_schedule(schedule);

  Flop flop_step = 0;
  for (std::size_t slot = 0; slot < trajectories.size(); ++slot) {
    const std::int64_t len = trajectories[slot].generated_len();
    const Flop update = f_train(student_cost, len);
    const Flop fwd_s = f_fwd(student_cost, len);
    const Flop fwd_t = f_fwd(teacher_cost, len);
    cost.add(step_index, CostCategory::student_update, update);
    if (!from_corpus[slot]) {
      cost.add(step_index, CostCategory::student_sampling, fwd_s);
      flop_step += fwd_s;
    }
    cost.add(step_index, CostCategory::student_logprob, fwd_s);
    cost.add(step_index, CostCategory::teacher_logprob, fwd_t);
    flop_step += update + fwd_s + fwd_t;
  }

  StepReport report;
  report.step = step_index;
  report.kl_estimate = loss;
  report.l_train = l_train;
  report.tokens_generated = batch.tokens;
  report.flop_step = flop_step;
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ============================================================================
// SeqKD step
// ============================================================================

StepReport seqkd_step(KGramPolicy& student, std::span<const CorpusRecord> corpus_batch,
                      const TrainConfig& config, AdamState& optimizer, CostReport& cost,
                      const ModelCostSpec& student_cost, std::int64_t step_index,
                      std::optional<std::int64_t> truncate_at) {
  require(!corpus_batch.empty(), Errc::empty_input, "empty corpus batch");
  if (truncate_at) {
    require(*truncate_at >= 0, Errc::invalid_argument, "truncate_at must be >= 0");
  }
  const auto t0 = std::chrono::steady_clock::now();

  SparseLogitGrad grad;
  grad.vocab_size = student.vocab().size;
  double nll = 0.0;
  std::int64_t tokens = 0;
  for (const CorpusRecord& record : corpus_batch) {
    const Trajectory& traj = record.trajectory;
    std::int64_t gen = traj.generated_len();
    if (truncate_at) gen = std::min(gen, *truncate_at);
    for (std::int64_t t = 0; t < gen; ++t) {
      const std::size_t pos = static_cast<std::size_t>(traj.prompt_len + t);
      const std::span<const TokenId> ctx(traj.tokens.data(), pos);
      const TokenId x = traj.tokens[pos];
      nll -= student.log_prob(ctx, x);
      const RowGrad g = student.grad_log_prob(ctx, x);
      grad.add_scaled(g.row, g.values, -1.0);  // d(-log p)/d logits
      ++tokens;
    }
  }
  if (tokens > 0) {
    const double inv = 1.0 / static_cast<double>(tokens);
    grad.scale(inv);
    nll *= inv;
  }
  optimizer.apply(student.logits(), grad.dense(student.row_count()), config.learning_rate);
  cost.add(step_index, CostCategory::student_update, f_seqkd_step(student_cost, tokens));

  StepReport report;
  report.step = step_index;
  report.kl_estimate = nll;
  report.l_train = truncate_at.value_or(-1);
  report.tokens_generated = tokens;
  report.flop_step = f_seqkd_step(student_cost, tokens);
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ============================================================================
// Full runs
// ============================================================================

namespace {

std::vector<Prompt> pick_batch(std::span<const Question> pool, int batch_prompts,
                               std::uint64_t seed, std::int64_t step_index) {
  Rng rng(derive_seed(seed, {stream::batch_select, static_cast<std::uint64_t>(step_index)}));
  std::vector<Prompt> prompts;
  prompts.reserve(static_cast<std::size_t>(batch_prompts));
  for (int i = 0; i < batch_prompts; ++i) {
    prompts.push_back(pool[rng.next_u64() % pool.size()].prompt);
  }
  return prompts;
}

PositionalBins diagnostic_bins(const KGramPolicy& student, const Policy& teacher,
                               std::span<const Question> pool, const TrainConfig& config,
                               std::int64_t eval_cap, std::int64_t step_index) {
  // Full-length rollouts scored without a mask: losses beyond any trained
  // prefix stay observable.
  Rng rng(derive_seed(config.seed, {stream::diagnostics,
                                    static_cast<std::uint64_t>(step_index)}));
  std::vector<Prompt> prompts;
  for (int i = 0; i < config.batch_prompts; ++i) {
    prompts.push_back(pool[rng.next_u64() % pool.size()].prompt);
  }
  SamplingConfig sampling = config.sampling;
  sampling.seed = derive_seed(config.seed, {stream::diagnostics,
                                            static_cast<std::uint64_t>(step_index), 1});
  const std::vector<Trajectory> rollouts = generate_batch(
      student, prompts, config.samples_per_prompt, eval_cap, sampling, config.workers);

  PositionalBins bins;
  bins.bin_width = effective_bin_width(config, eval_cap);
  const bool raw = config.sampling.temperature == 1.0 && config.sampling.top_p == 1.0;
  for (const Trajectory& traj : rollouts) {
    const ScoredTrajectory s =
        raw ? score_trajectory_onpolicy(student, teacher, traj, MaskSpec::Full())
            : score_trajectory(student, teacher, traj, MaskSpec::Full());
    for (std::size_t t = 0; t < s.student_logprobs.size(); ++t) {
      bins.add(static_cast<std::int64_t>(t), s.student_logprobs[t] - s.teacher_logprobs[t]);
    }
  }
  return bins;
}

}  // namespace

TrainLog train(const RunSpec& spec) {
  require(spec.student != nullptr, Errc::invalid_argument, "train() needs a student");
  const TrainConfig& config = spec.config;
  require(config.batch_prompts >= 1 && config.samples_per_prompt >= 1 && config.steps >= 0,
          Errc::invalid_argument, "invalid batch shape or step count");
  require(!spec.dev_questions.empty(), Errc::empty_input, "dev set is empty");
  if (spec.method == TrainMethod::opd) {
    require(spec.teacher != nullptr, Errc::invalid_argument, "OPD needs a teacher");
    require(!spec.train_questions.empty(), Errc::empty_input, "train set is empty");
  } else {
    require(spec.corpus != nullptr && !spec.corpus->empty(), Errc::empty_input,
            "SeqKD needs a corpus");
  }

  if (!spec.checkpoint_dir.empty()) {
    std::filesystem::create_directories(spec.checkpoint_dir);
  }

  TrainLog log;
  PrefixSchedule schedule = spec.schedule;
  AdamState optimizer(spec.student->param_count(), config.adam);
  const std::int64_t eval_cap = effective_eval_cap(config, spec.schedule);

  auto evaluate = [&](std::int64_t step_index) {
    EvalRecord record;
    record.step = step_index;
    record.dev_accuracy = acc_at_k(
        *spec.student, spec.dev_questions, config.eval_samples, eval_cap,
        derive_seed(config.seed, {stream::eval, static_cast<std::uint64_t>(step_index)}),
        config.workers);
    if (!spec.checkpoint_dir.empty()) {
      record.checkpoint_path =
          spec.checkpoint_dir + "/checkpoint_step" + std::to_string(step_index) + ".popd";
      spec.student->save(record.checkpoint_path);
    }
    log.evals.push_back(record);
    if (config.diagnostics_bins && spec.teacher != nullptr &&
        !spec.train_questions.empty()) {
      log.bins_by_step[step_index] = diagnostic_bins(
          *spec.student, *spec.teacher, spec.train_questions, config, eval_cap, step_index);
    }
  };

  evaluate(0);
  for (std::int64_t s = 1; s <= config.steps; ++s) {
    StepReport report;
    if (spec.method == TrainMethod::opd) {
      const std::vector<Prompt> prompts =
          pick_batch(spec.train_questions, config.batch_prompts, config.seed, s);
      report = opd_step(*spec.student, *spec.teacher, prompts, config, schedule, optimizer,
                        log.cost, spec.student_cost, spec.teacher_cost, s, spec.corpus);
    } else {
      Rng rng(derive_seed(config.seed, {stream::batch_select, static_cast<std::uint64_t>(s)}));
      std::vector<CorpusRecord> batch;
      batch.reserve(static_cast<std::size_t>(config.batch_prompts));
      for (int i = 0; i < config.batch_prompts; ++i) {
        batch.push_back((*spec.corpus)[rng.next_u64() % spec.corpus->size()]);
      }
      report = seqkd_step(*spec.student, batch, config, optimizer, log.cost,
                          spec.student_cost, s, spec.seqkd_truncate);
    }
    log.steps.push_back(report);
    if ((config.eval_every > 0 && s % config.eval_every == 0) || s == config.steps) {
      evaluate(s);
    }
  }
  return log;
}

std::size_t select_best_checkpoint(std::span<const EvalRecord> evals) {
  require(!evals.empty(), Errc::empty_input, "no evaluations recorded");
  std::size_t best = 0;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    if (evals[i].dev_accuracy > evals[best].dev_accuracy) best = i;
  }
  return best;
}

}  // namespace opd
