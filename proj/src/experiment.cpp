#include "opd/experiment.hpp"

#include "opd/analytics.hpp"
#include "opd/oracle.hpp"
#include "opd/probe.hpp"
#include "opd/table.hpp"
#include "opd/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

namespace opd {

namespace {

namespace fs = std::filesystem;

// ============================================================================
// Config loading
// ============================================================================

// Every key the harness understands. A config may carry keys for another
// subcommand over the same task; anything outside this list is a typo and is
// rejected before any work starts.
void mark_recognized_keys(const Config& cfg) {
  static const char* keys[] = {
      "seed",
      "task.base", "task.plan_max", "task.variants", "task.reserved_starts",
      "task.op_kind", "task.op_operand",
      "data.n_train", "data.n_dev", "data.n_test", "data.seed",
      "student.order", "student.init_stddev", "student.checkpoint",
      "student.pretrain", "student.pretrain_steps", "student.pretrain_lr",
      "teacher.epsilon", "teacher.checkpoint",
      "train.batch_prompts", "train.samples_per_prompt", "train.learning_rate",
      "train.steps", "train.eval_every", "train.eval_samples", "train.eval_cap",
      "train.adam_beta1", "train.adam_beta2", "train.adam_epsilon",
      "train.weight_decay", "train.checkpoints",
      "schedule.l0", "schedule.delta", "schedule.cap",
      "mask.kind", "mask.prefix", "mask.begin", "mask.end", "mask.tail",
      "divergence.beta", "divergence.lambda", "divergence.estimator",
      "sampling.temperature", "sampling.top_p",
      "diagnostics.bins", "diagnostics.bin_width", "diagnostics.boundary_position",
      "cost.teacher_params", "cost.teacher_param_multiplier",
      "seqkd.truncate_at", "seqkd.corpus", "seqkd.samples_per_question",
      "probe.prefix_lengths", "probe.answer_margin", "probe.samples_per_question",
      "probe.cap", "probe.student", "probe.student_epsilon",
      "probe.student_checkpoint", "probe.questions",
      "ablate.window",
      "sweep.learning_rates",
      "oracle.instances", "oracle.kl_trajectories", "oracle.grad_trajectories",
      "oracle.logit_stddev",
  };
  for (const char* key : keys) cfg.has(key);
}

PlanChainTask load_task(const Config& cfg) {
  PlanChainConfig tc;
  tc.base = static_cast<int>(cfg.get_i64("task.base", 10));
  tc.plan_max = static_cast<int>(cfg.get_i64("task.plan_max", 32));
  tc.variants = static_cast<int>(cfg.get_i64("task.variants", 4));
  tc.reserved_starts = static_cast<int>(cfg.get_i64("task.reserved_starts", 0));
  const std::string kind = cfg.get_string("task.op_kind", "add");
  require(kind == "add" || kind == "mul", Errc::config_error,
          "task.op_kind must be add or mul");
  tc.op.kind = kind == "add" ? PlanChainOp::Kind::add : PlanChainOp::Kind::mul;
  tc.op.operand = static_cast<int>(cfg.get_i64("task.op_operand", 3));
  return PlanChainTask(tc);
}

DatasetSplits load_dataset(const Config& cfg, const PlanChainTask& task,
                           std::uint64_t seed) {
  const int n_train = static_cast<int>(cfg.get_i64("data.n_train", 200));
  const int n_dev = static_cast<int>(cfg.get_i64("data.n_dev", 60));
  const int n_test = static_cast<int>(cfg.get_i64("data.n_test", 60));
  const std::uint64_t data_seed = cfg.get_u64("data.seed", seed);
  return make_dataset(task, n_train, n_dev, n_test, data_seed);
}

KGramPolicy load_student(const Config& cfg, const PlanChainTask& task,
                         std::uint64_t seed) {
  const std::string checkpoint = cfg.get_string("student.checkpoint", "");
  const int order = static_cast<int>(cfg.get_i64("student.order", 3));
  const double stddev = cfg.get_f64("student.init_stddev", 0.0);
  const std::string pretrain = cfg.get_string("student.pretrain", "none");
  const std::int64_t pretrain_steps = cfg.get_i64("student.pretrain_steps", 300);
  const double pretrain_lr = cfg.get_f64("student.pretrain_lr", 30.0);
  if (!checkpoint.empty()) {
    KGramPolicy student = KGramPolicy::load(checkpoint);
    require(student.vocab() == task.vocab(), Errc::incompatible_policies,
            "student checkpoint vocabulary does not match the task");
    return student;
  }
  KGramPolicy student = stddev > 0.0 ? KGramPolicy::random(task.vocab(), order, stddev, seed)
                                     : KGramPolicy(task.vocab(), order);
  if (pretrain == "none") return student;
  require(pretrain == "execution", Errc::config_error,
          "student.pretrain must be none or execution");
  const std::vector<std::vector<TokenId>> corpus = task.pretrain_corpus();
  return fit_mle(student, corpus, static_cast<int>(pretrain_steps), pretrain_lr);
}

std::unique_ptr<Policy> load_teacher(const Config& cfg, const PlanChainTask& task) {
  const std::string checkpoint = cfg.get_string("teacher.checkpoint", "");
  const double epsilon = cfg.get_f64("teacher.epsilon", 0.05);
  if (!checkpoint.empty()) {
    auto teacher = std::make_unique<KGramPolicy>(KGramPolicy::load(checkpoint));
    require(teacher->vocab() == task.vocab(), Errc::incompatible_policies,
            "teacher checkpoint vocabulary does not match the task");
    return teacher;
  }
  return std::make_unique<SmoothedExpertPolicy>(task.make_teacher(epsilon));
}

PrefixSchedule load_schedule(const Config& cfg) {
  return make_schedule(cfg.get_i64("schedule.l0", 1), cfg.get_i64("schedule.delta", 8),
                       cfg.get_i64("schedule.cap", 256));
}

TrainMask load_mask(const Config& cfg) {
  TrainMask mask;
  const std::string kind = cfg.get_string("mask.kind", "schedule");
  if (kind == "schedule") {
    mask.follow_schedule = true;
  } else if (kind == "full") {
    mask.follow_schedule = false;
    mask.spec = MaskSpec::Full();
  } else if (kind == "prefix") {
    mask.follow_schedule = false;
    mask.spec = MaskSpec::Prefix(cfg.get_i64("mask.prefix", 8));
  } else if (kind == "window") {
    mask.follow_schedule = false;
    mask.spec = MaskSpec::Window(cfg.get_i64("mask.begin", 8), cfg.get_i64("mask.end", 16));
  } else if (kind == "tail") {
    mask.follow_schedule = false;
    mask.spec = MaskSpec::Tail(cfg.get_i64("mask.tail", 8));
  } else {
    fail(Errc::config_error, "mask.kind must be schedule|full|prefix|window|tail");
  }
  return mask;
}

TrainConfig load_train_config(const Config& cfg, std::uint64_t seed, int workers) {
  TrainConfig tc;
  tc.batch_prompts = static_cast<int>(cfg.get_i64("train.batch_prompts", 32));
  tc.samples_per_prompt = static_cast<int>(cfg.get_i64("train.samples_per_prompt", 4));
  tc.learning_rate = cfg.get_f64("train.learning_rate", 0.1);
  tc.steps = cfg.get_i64("train.steps", 60);
  tc.eval_every = cfg.get_i64("train.eval_every", 10);
  tc.eval_samples = static_cast<int>(cfg.get_i64("train.eval_samples", 16));
  tc.eval_cap = cfg.get_i64("train.eval_cap", 0);
  tc.mask = load_mask(cfg);
  tc.divergence.beta = cfg.get_f64("divergence.beta", 1.0);
  tc.divergence.lambda_onpolicy = cfg.get_f64("divergence.lambda", 1.0);
  const std::string estimator = cfg.get_string("divergence.estimator", "sampled");
  require(estimator == "sampled" || estimator == "full_distribution", Errc::config_error,
          "divergence.estimator must be sampled or full_distribution");
  tc.divergence.estimator =
      estimator == "sampled" ? Estimator::sampled : Estimator::full_distribution;
  tc.divergence.validate();
  tc.sampling.temperature = cfg.get_f64("sampling.temperature", 1.0);
  tc.sampling.top_p = cfg.get_f64("sampling.top_p", 1.0);
  tc.adam.beta1 = cfg.get_f64("train.adam_beta1", 0.9);
  tc.adam.beta2 = cfg.get_f64("train.adam_beta2", 0.999);
  tc.adam.epsilon = cfg.get_f64("train.adam_epsilon", 1e-8);
  tc.adam.weight_decay = cfg.get_f64("train.weight_decay", 0.0);
  tc.seed = seed;
  tc.workers = workers;
  tc.diagnostics_bins = cfg.get_bool("diagnostics.bins", false);
  tc.bin_width = cfg.get_i64("diagnostics.bin_width", 0);
  return tc;
}

ModelCostSpec student_cost_spec(const KGramPolicy& student) {
  return ModelCostSpec{"S", student.param_count()};
}

ModelCostSpec teacher_cost_spec(const Config& cfg, const KGramPolicy& student) {
  const std::int64_t absolute = cfg.get_i64("cost.teacher_params", 0);
  if (absolute > 0) return ModelCostSpec{"T", absolute};
  const double multiplier = cfg.get_f64("cost.teacher_param_multiplier", 4.0);
  require(multiplier > 0.0, Errc::config_error, "teacher parameter multiplier must be > 0");
  return ModelCostSpec{"T",
                       static_cast<std::int64_t>(multiplier * static_cast<double>(
                                                                  student.param_count()))};
}

OffPolicyCorpus load_or_build_corpus(const Config& cfg, const PlanChainTask& task,
                                     const Policy& teacher,
                                     std::span<const Question> questions,
                                     std::int64_t cap, std::uint64_t seed) {
  const std::string path = cfg.get_string("seqkd.corpus", "");
  if (!path.empty()) {
    std::ifstream in(path);
    require(in.good(), Errc::io_error, "cannot read corpus: " + path);
    OffPolicyCorpus corpus = read_corpus_jsonl(in);
    require(!corpus.empty(), Errc::empty_input, "corpus file holds no records: " + path);
    for (const CorpusRecord& r : corpus) {
      for (TokenId t : r.trajectory.tokens) {
        require(t >= 0 && t < task.vocab().size, Errc::invalid_token,
                "corpus token out of range for the task vocabulary");
      }
    }
    return corpus;
  }
  const int per_question = static_cast<int>(cfg.get_i64("seqkd.samples_per_question", 1));
  return build_offpolicy_corpus(teacher, questions, per_question, cap, seed);
}

// ============================================================================
// Table emission
// ============================================================================

std::string relative_to(const std::string& path, const std::string& base) {
  if (path.rfind(base + "/", 0) == 0) return path.substr(base.size() + 1);
  return path;
}

void write_train_tables(const TrainLog& log, const std::string& out_dir) {
  {
    TableWriter t(out_dir + "/train_log.tsv",
                  {"step", "kl_estimate", "l_train", "tokens_generated", "flop_step",
                   "flop_cumulative"});
    Flop cumulative = 0;
    for (const StepReport& s : log.steps) {
      cumulative += s.flop_step;
      t.row().cell(s.step).cell(s.kl_estimate).cell(s.l_train).cell(s.tokens_generated)
          .cell(s.flop_step).cell(cumulative);
    }
  }
  {
    TableWriter t(out_dir + "/evals.tsv", {"step", "dev_accuracy", "checkpoint"});
    for (const EvalRecord& e : log.evals) {
      t.row().cell(e.step).cell(e.dev_accuracy).cell(relative_to(e.checkpoint_path, out_dir));
    }
  }
  {
    TableWriter t(out_dir + "/cost.tsv", {"step", "category", "flop", "cumulative"});
    Flop running[kCostCategories] = {0, 0, 0, 0};
    for (const CostReport::Entry& e : log.cost.entries) {
      running[static_cast<int>(e.category)] += e.flop;
      t.row().cell(e.step).cell(cost_category_name(e.category)).cell(e.flop)
          .cell(running[static_cast<int>(e.category)]);
    }
  }
  if (!log.bins_by_step.empty()) {
    TableWriter t(out_dir + "/bins.tsv", {"step", "bin_index", "mean_loss", "count"});
    for (const auto& [step, bins] : log.bins_by_step) {
      for (const std::int64_t idx : bins.nonempty()) {
        t.row().cell(step).cell(idx).cell(bins.mean(idx)).cell(
            bins.bins.at(idx).second);
      }
    }
  }
  {
    const std::size_t best = select_best_checkpoint(log.evals);
    TableWriter t(out_dir + "/best.tsv", {"step", "dev_accuracy", "checkpoint"});
    t.row().cell(log.evals[best].step).cell(log.evals[best].dev_accuracy)
        .cell(relative_to(log.evals[best].checkpoint_path, out_dir));
  }
  {
    TableWriter t(out_dir + "/timings.tsv", {"step", "wall_ms"});
    for (const StepReport& s : log.steps) t.row().cell(s.step).cell(s.wall_ms);
  }
}

Flop cumulative_flop_at(const TrainLog& log, std::int64_t step) {
  Flop total = 0;
  for (const StepReport& s : log.steps) {
    if (s.step <= step) total += s.flop_step;
  }
  return total;
}

// ============================================================================
// Subcommands
// ============================================================================

struct LoadedRun {
  PlanChainTask task;
  DatasetSplits data;
  KGramPolicy student;
  std::unique_ptr<Policy> teacher;
  TrainConfig config;
  PrefixSchedule schedule;
  ModelCostSpec student_cost;
  ModelCostSpec teacher_cost;
  std::uint64_t seed = 1;
  bool write_checkpoints = true;
};

LoadedRun load_run(const Config& cfg, const ExperimentOptions& options) {
  const std::uint64_t seed = options.seed ? *options.seed : cfg.get_u64("seed", 1);
  PlanChainTask task = load_task(cfg);
  DatasetSplits data = load_dataset(cfg, task, seed);
  KGramPolicy student = load_student(cfg, task, seed);
  std::unique_ptr<Policy> teacher = load_teacher(cfg, task);
  TrainConfig config = load_train_config(cfg, seed, options.workers);
  PrefixSchedule schedule = load_schedule(cfg);
  ModelCostSpec scost = student_cost_spec(student);
  ModelCostSpec tcost = teacher_cost_spec(cfg, student);
  const bool write_checkpoints = cfg.get_bool("train.checkpoints", true);
  return LoadedRun{std::move(task), std::move(data), std::move(student), std::move(teacher),
                   config, schedule, scost, tcost, seed, write_checkpoints};
}

int cmd_train(const Config& cfg, const ExperimentOptions& options, TrainMethod method) {
  LoadedRun run = load_run(cfg, options);
  std::optional<std::int64_t> truncate;
  OffPolicyCorpus corpus;
  const bool needs_corpus =
      method == TrainMethod::seqkd || run.config.divergence.lambda_onpolicy < 1.0;
  if (method == TrainMethod::seqkd) {
    const std::int64_t t = cfg.get_i64("seqkd.truncate_at", -1);
    if (t >= 0) truncate = t;
  }
  if (needs_corpus) {
    corpus = load_or_build_corpus(cfg, run.task, *run.teacher, run.data.train,
                                  run.schedule.cap, run.seed);
  }

  RunSpec spec;
  spec.method = method;
  spec.student = &run.student;
  spec.teacher = run.teacher.get();
  spec.train_questions = run.data.train;
  spec.dev_questions = run.data.dev;
  spec.corpus = needs_corpus ? &corpus : nullptr;
  spec.config = run.config;
  spec.schedule = run.schedule;
  spec.student_cost = run.student_cost;
  spec.teacher_cost = run.teacher_cost;
  spec.seqkd_truncate = truncate;
  if (run.write_checkpoints) spec.checkpoint_dir = options.out_dir + "/checkpoints";

  const TrainLog log = train(spec);
  write_train_tables(log, options.out_dir);
  return 0;
}

int cmd_bins_report(const Config& cfg, const ExperimentOptions& options) {
  LoadedRun run = load_run(cfg, options);
  run.config.diagnostics_bins = true;
  const std::int64_t boundary_position = cfg.get_i64("diagnostics.boundary_position", 0);

  RunSpec spec;
  spec.method = TrainMethod::opd;
  spec.student = &run.student;
  spec.teacher = run.teacher.get();
  spec.train_questions = run.data.train;
  spec.dev_questions = run.data.dev;
  spec.config = run.config;
  spec.schedule = run.schedule;
  spec.student_cost = run.student_cost;
  spec.teacher_cost = run.teacher_cost;
  spec.checkpoint_dir = options.out_dir + "/checkpoints";

  const TrainLog log = train(spec);
  write_train_tables(log, options.out_dir);

  std::int64_t width = run.config.bin_width;
  if (width <= 0) {
    const std::int64_t eval_cap =
        run.config.eval_cap > 0 ? run.config.eval_cap : run.schedule.cap;
    width = std::max<std::int64_t>(1, eval_cap / 64);
  }
  const TailTrend trend = profile_series(log.bins_by_step, boundary_position / width);
  {
    TableWriter t(options.out_dir + "/trend.tsv",
                  {"step_from", "step_to", "bin_index", "delta"});
    for (const TailTrend::Delta& d : trend.deltas) {
      t.row().cell(d.step_from).cell(d.step_to).cell(d.bin).cell(d.delta);
    }
  }
  {
    TableWriter t(options.out_dir + "/trend_summary.tsv",
                  {"step_from", "step_to", "beyond_negative", "beyond_zero",
                   "beyond_positive"});
    for (const TailTrend::Summary& s : trend.summaries) {
      t.row().cell(s.step_from).cell(s.step_to).cell(s.negative).cell(s.zero)
          .cell(s.positive);
    }
  }
  return 0;
}

int cmd_probe(const Config& cfg, const ExperimentOptions& options) {
  const std::uint64_t seed = options.seed ? *options.seed : cfg.get_u64("seed", 1);
  PlanChainTask task = load_task(cfg);
  DatasetSplits data = load_dataset(cfg, task, seed);
  std::unique_ptr<Policy> teacher = load_teacher(cfg, task);

  ProbeConfig pc;
  pc.prefix_lengths = cfg.get_i64_list("probe.prefix_lengths", {0, 4, 8, 16, 32, 64});
  const std::int64_t margin = cfg.get_i64("probe.answer_margin", -1);
  // Auto margin: answer length + 2 covers [answer_sep, answer, eos].
  pc.answer_margin = margin >= 0 ? margin : 3;
  pc.samples_per_question = static_cast<int>(cfg.get_i64("probe.samples_per_question", 16));
  const std::int64_t cap = cfg.get_i64("probe.cap", 0);
  pc.cap = cap > 0 ? cap : task.max_trace_len() + 5;
  pc.seed = derive_seed(seed, {stream::probe});

  const std::string student_kind = cfg.get_string("probe.student", "pretrained");
  std::unique_ptr<Policy> student;
  if (student_kind == "uniform") {
    student = std::make_unique<KGramPolicy>(
        task.vocab(), static_cast<int>(cfg.get_i64("student.order", 3)));
  } else if (student_kind == "pretrained") {
    // the base student used by the training subcommands
    student = std::make_unique<KGramPolicy>(load_student(cfg, task, seed));
  } else if (student_kind == "smoothed") {
    student = std::make_unique<SmoothedExpertPolicy>(
        task.make_teacher(cfg.get_f64("probe.student_epsilon", 0.35)));
  } else if (student_kind == "checkpoint") {
    auto loaded = std::make_unique<KGramPolicy>(
        KGramPolicy::load(cfg.get_string("probe.student_checkpoint", "")));
    require(loaded->vocab() == task.vocab(), Errc::incompatible_policies,
            "probe student checkpoint vocabulary does not match the task");
    student = std::move(loaded);
  } else {
    fail(Errc::config_error, "probe.student must be uniform|pretrained|smoothed|checkpoint");
  }

  const std::string which = cfg.get_string("probe.questions", "dev");
  std::vector<Question> questions;
  if (which == "train") questions = data.train;
  else if (which == "dev") questions = data.dev;
  else if (which == "test") questions = data.test;
  else if (which == "all") {
    questions = data.train;
    questions.insert(questions.end(), data.dev.begin(), data.dev.end());
    questions.insert(questions.end(), data.test.begin(), data.test.end());
  } else {
    fail(Errc::config_error, "probe.questions must be train|dev|test|all");
  }

  const ProbeResult result =
      teacher_prefix_probe(*teacher, *student, questions, pc, options.workers);

  {
    TableWriter t(options.out_dir + "/probe.tsv",
                  {"prefix_requested", "prefix_effective_mean", "mean_accuracy",
                   "question_count"});
    for (const ProbeResult::Row& r : result.rows) {
      t.row().cell(r.requested).cell(r.mean_effective).cell(r.mean_accuracy)
          .cell(r.question_count);
    }
  }
  {
    TableWriter t(options.out_dir + "/probe_detail.tsv",
                  {"question_index", "question", "teacher_len", "prefix_requested",
                   "prefix_effective"});
    for (const ProbeResult::QuestionDetail& d : result.details) {
      for (std::size_t li = 0; li < pc.prefix_lengths.size(); ++li) {
        t.row().cell(static_cast<std::int64_t>(d.question_index))
            .cell(questions[d.question_index].text).cell(d.teacher_len)
            .cell(pc.prefix_lengths[li]).cell(d.effective[li]);
      }
    }
  }
  {
    TableWriter t(options.out_dir + "/probe_skipped.tsv", {"question_index", "question"});
    for (const std::size_t qi : result.skipped) {
      t.row().cell(static_cast<std::int64_t>(qi)).cell(questions[qi].text);
    }
  }
  return 0;
}

int cmd_ablate_window(const Config& cfg, const ExperimentOptions& options) {
  LoadedRun run = load_run(cfg, options);
  const std::int64_t w = cfg.get_i64("ablate.window", 8);
  require(w >= 1, Errc::config_error, "ablate.window must be >= 1");

  const std::vector<MaskSpec> arms = {
      MaskSpec::Prefix(w),        MaskSpec::Window(w, 2 * w), MaskSpec::Window(2 * w, 3 * w),
      MaskSpec::Window(3 * w, 4 * w), MaskSpec::Tail(w),
  };

  TableWriter t(options.out_dir + "/ablate.tsv",
                {"mask", "step", "dev_accuracy", "flop_cumulative"});
  for (const MaskSpec& arm : arms) {
    KGramPolicy student = run.student;  // identical init for every arm
    RunSpec spec;
    spec.method = TrainMethod::opd;
    spec.student = &student;
    spec.teacher = run.teacher.get();
    spec.train_questions = run.data.train;
    spec.dev_questions = run.data.dev;
    spec.config = run.config;
    spec.config.mask.follow_schedule = false;
    spec.config.mask.spec = arm;
    // Window ablations need full-length rollouts under every mask.
    spec.schedule = make_schedule(run.schedule.cap, 0, run.schedule.cap);
    spec.student_cost = run.student_cost;
    spec.teacher_cost = run.teacher_cost;

    const TrainLog log = train(spec);
    for (const EvalRecord& e : log.evals) {
      t.row().cell(arm.label()).cell(e.step).cell(e.dev_accuracy)
          .cell(cumulative_flop_at(log, e.step));
    }
  }
  return 0;
}

int cmd_sweep_lr(const Config& cfg, const ExperimentOptions& options) {
  LoadedRun run = load_run(cfg, options);
  const std::vector<double> rates =
      cfg.get_f64_list("sweep.learning_rates", {5e-6, 2e-5, 5e-5});

  TableWriter t(options.out_dir + "/sweep.tsv",
                {"learning_rate", "step", "dev_accuracy", "flop_cumulative"});
  for (const double lr : rates) {
    KGramPolicy student = run.student;
    RunSpec spec;
    spec.method = TrainMethod::opd;
    spec.student = &student;
    spec.teacher = run.teacher.get();
    spec.train_questions = run.data.train;
    spec.dev_questions = run.data.dev;
    spec.config = run.config;
    spec.config.learning_rate = lr;
    spec.schedule = run.schedule;
    spec.student_cost = run.student_cost;
    spec.teacher_cost = run.teacher_cost;

    const TrainLog log = train(spec);
    for (const EvalRecord& e : log.evals) {
      t.row().cell(lr).cell(e.step).cell(e.dev_accuracy).cell(cumulative_flop_at(log, e.step));
    }
  }
  return 0;
}

int cmd_cost_report(const Config& cfg, const ExperimentOptions& options) {
  LoadedRun run = load_run(cfg, options);

  TableWriter t(options.out_dir + "/cost_projection.tsv",
                {"step", "l_train", "f_opd_rollout", "f_step", "flop_cumulative"});
  PrefixSchedule schedule = run.schedule;
  Flop cumulative = 0;
  std::vector<std::int64_t> lengths(
      static_cast<std::size_t>(run.config.batch_prompts) *
          static_cast<std::size_t>(run.config.samples_per_prompt),
      0);
  for (std::int64_t s = 1; s <= run.config.steps; ++s) {
    const std::int64_t l = schedule.current;
    std::fill(lengths.begin(), lengths.end(), l);
    const Flop per_rollout = f_opd(run.student_cost, run.teacher_cost, l);
    const Flop step_total = f_step(run.config.batch_prompts, run.config.samples_per_prompt,
                                   lengths, run.student_cost, run.teacher_cost);
    cumulative += step_total;
    t.row().cell(s).cell(l).cell(per_rollout).cell(step_total).cell(cumulative);
    schedule = advance_schedule(schedule);
  }
  return 0;
}

int cmd_oracle_check(const Config& cfg, const ExperimentOptions& options) {
  const std::uint64_t seed = options.seed ? *options.seed : cfg.get_u64("seed", 1);
  const int instances = static_cast<int>(cfg.get_i64("oracle.instances", 5));
  const std::int64_t kl_traj = cfg.get_i64("oracle.kl_trajectories", 600000);
  const std::int64_t grad_traj = cfg.get_i64("oracle.grad_trajectories", 250000);
  // Small logit scale: the token-level surrogate drops the state-visitation
  // part of the exact gradient, which is higher order in the logit spread.
  const double stddev = cfg.get_f64("oracle.logit_stddev", 0.15);

  const std::vector<OracleGateResult> results =
      run_oracle_gates(instances, kl_traj, grad_traj, seed, stddev);

  TableWriter t(options.out_dir + "/oracle_check.tsv",
                {"instance", "vocab", "order", "cap", "mask", "exact_kl", "mc_kl",
                 "rel_error", "cosine", "pass"});
  bool all_pass = true;
  for (const OracleGateResult& r : results) {
    const bool pass = r.kl_pass && r.grad_pass;
    all_pass = all_pass && pass;
    t.row().cell(r.instance).cell(static_cast<std::int64_t>(r.vocab_size)).cell(r.order)
        .cell(r.cap).cell(r.mask).cell(r.exact_kl).cell(r.mc_kl).cell(r.rel_error)
        .cell(r.cosine).cell(pass ? "yes" : "no");
    std::printf("[%s] instance %d V=%d k=%d cap=%lld mask=%s rel_err=%.4f cosine=%.5f\n",
                pass ? "PASS" : "FAIL", r.instance, r.vocab_size, r.order,
                static_cast<long long>(r.cap), r.mask.c_str(), r.rel_error, r.cosine);
  }
  return all_pass ? 0 : 1;
}

}  // namespace

// ============================================================================
// Oracle gates
// ============================================================================

std::vector<OracleGateResult> run_oracle_gates(int instance_count,
                                               std::int64_t kl_trajectories,
                                               std::int64_t grad_trajectories,
                                               std::uint64_t seed, double logit_stddev) {
  require(instance_count >= 1, Errc::invalid_argument, "need at least one instance");
  std::vector<OracleGateResult> results;

  for (int i = 0; i < instance_count; ++i) {
    Vocabulary vocab;
    vocab.size = 4 + (i % 2);
    const int order = 1 + (i % 2);
    const std::int64_t cap = 2 + (i % 3);
    const MaskSpec mask = MaskSpec::Full();

    const KGramPolicy student = KGramPolicy::random(
        vocab, order, logit_stddev, derive_seed(seed, {static_cast<std::uint64_t>(i), 1}));
    const KGramPolicy teacher = KGramPolicy::random(
        vocab, order, logit_stddev, derive_seed(seed, {static_cast<std::uint64_t>(i), 2}));
    Prompt prompt;
    prompt.tokens = {vocab.bos};
    prompt.think_enforced = false;

    OracleGateResult r;
    r.instance = i;
    r.vocab_size = vocab.size;
    r.order = order;
    r.cap = cap;
    r.mask = mask.label();
    r.exact_kl = enumerate_kl(student, teacher, prompt, cap, mask);

    // Monte-Carlo mean of kl_estimate over equally sized batches.
    const std::int64_t chunk = 20000;
    const std::int64_t kl_chunks = (kl_trajectories + chunk - 1) / chunk;
    const std::vector<Prompt> prompts(1, prompt);
    double kl_sum = 0.0;
    for (std::int64_t c = 0; c < kl_chunks; ++c) {
      SamplingConfig cfg;
      cfg.seed = derive_seed(seed, {static_cast<std::uint64_t>(i), 101,
                                    static_cast<std::uint64_t>(c)});
      const std::vector<Trajectory> batch =
          generate_batch(student, prompts, static_cast<int>(chunk), cap, cfg);
      std::vector<ScoredTrajectory> scored;
      scored.reserve(batch.size());
      for (const Trajectory& t : batch) {
        scored.push_back(score_trajectory(student, teacher, t, mask));
      }
      kl_sum += kl_estimate(scored);
    }
    r.mc_kl = kl_sum / static_cast<double>(kl_chunks);
    r.rel_error = std::abs(r.mc_kl - r.exact_kl) / std::max(std::abs(r.exact_kl), 0.05);
    r.kl_pass = r.rel_error < 0.02;

    // Monte-Carlo mean of the surrogate gradient vs the finite-difference
    // gradient of the enumerated objective.
    const std::int64_t grad_chunks = (grad_trajectories + chunk - 1) / chunk;
    SparseLogitGrad mc_grad;
    mc_grad.vocab_size = vocab.size;
    for (std::int64_t c = 0; c < grad_chunks; ++c) {
      SamplingConfig cfg;
      cfg.seed = derive_seed(seed, {static_cast<std::uint64_t>(i), 202,
                                    static_cast<std::uint64_t>(c)});
      const std::vector<Trajectory> batch =
          generate_batch(student, prompts, static_cast<int>(chunk), cap, cfg);
      std::vector<ScoredTrajectory> scored;
      scored.reserve(batch.size());
      for (const Trajectory& t : batch) {
        scored.push_back(score_trajectory(student, teacher, t, mask));
      }
      const SparseLogitGrad g = surrogate_gradient(student, scored);
      for (const auto& [row, values] : g.rows) mc_grad.add_scaled(row, values, 1.0);
    }
    mc_grad.scale(1.0 / static_cast<double>(grad_chunks));

    const std::vector<double> mc = mc_grad.dense(student.row_count());
    const std::vector<double> fd = enumerate_kl_gradient(student, teacher, prompt, cap, mask);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < mc.size(); ++j) {
      dot += mc[j] * fd[j];
      na += mc[j] * mc[j];
      nb += fd[j] * fd[j];
    }
    r.cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    r.grad_pass = r.cosine > 0.99;
    results.push_back(r);
  }
  return results;
}

// ============================================================================
// Dispatch
// ============================================================================

int run_experiment(const std::string& subcommand, const ExperimentOptions& options) {
  require(!options.out_dir.empty(), Errc::config_error, "--out directory is required");
  fs::create_directories(options.out_dir);
  const Config cfg = Config::from_file(options.config_path);
  mark_recognized_keys(cfg);
  cfg.reject_unknown_keys();

  if (subcommand == "train-opd") return cmd_train(cfg, options, TrainMethod::opd);
  if (subcommand == "train-seqkd") return cmd_train(cfg, options, TrainMethod::seqkd);
  if (subcommand == "probe") return cmd_probe(cfg, options);
  if (subcommand == "ablate-window") return cmd_ablate_window(cfg, options);
  if (subcommand == "bins-report") return cmd_bins_report(cfg, options);
  if (subcommand == "cost-report") return cmd_cost_report(cfg, options);
  if (subcommand == "oracle-check") return cmd_oracle_check(cfg, options);
  if (subcommand == "sweep-lr") return cmd_sweep_lr(cfg, options);
  fail(Errc::config_error, "unknown subcommand: " + subcommand);
}

}  // namespace opd
