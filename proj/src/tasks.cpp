#include "opd/tasks.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace opd {

// ============================================================================
// Answer extraction
// ============================================================================

std::optional<std::vector<TokenId>> extract_answer(std::span<const TokenId> tokens,
                                                   const Vocabulary& vocab) {
  if (tokens.empty() || tokens.back() != vocab.eos) return std::nullopt;
  std::ptrdiff_t sep = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(tokens.size()) - 1; i >= 0; --i) {
    if (tokens[static_cast<std::size_t>(i)] == vocab.answer_sep) {
      sep = i;
      break;
    }
  }
  if (sep < 0) return std::nullopt;
  return std::vector<TokenId>(tokens.begin() + sep + 1, tokens.end() - 1);
}

bool is_correct(const Trajectory& trajectory, const Question& question,
                const Vocabulary& vocab) {
  require(!question.answer.empty(), Errc::invalid_data,
          "question carries no reference answer");
  const auto extracted = extract_answer(trajectory.tokens, vocab);
  return extracted.has_value() && *extracted == question.answer;
}

// ============================================================================
// PlanChainTask
// ============================================================================

PlanChainTask::PlanChainTask(const PlanChainConfig& config) : config_(config) {
  require(config_.base >= 2, Errc::invalid_argument, "base must be >= 2");
  require(config_.plan_max >= 1, Errc::invalid_argument, "plan_max must be >= 1");
  require(config_.variants >= 1, Errc::invalid_argument, "variants must be >= 1");
  require(config_.reserved_starts >= 0 && config_.reserved_starts < config_.base,
          Errc::invalid_argument, "reserved_starts must lie in [0, base)");
  const int d = config_.op.operand;
  if (config_.op.kind == PlanChainOp::Kind::add) {
    require(d >= 1 && d < config_.base, Errc::invalid_argument,
            "add operand must lie in [1, base)");
  } else {
    require(d >= 2 && d < config_.base, Errc::invalid_argument,
            "mul operand must lie in [2, base)");
  }
  vocab_.size = 5 + config_.base + config_.plan_max + config_.variants;
  vocab_.bos = 0;
  vocab_.eos = 1;
  vocab_.think = 2;
  vocab_.answer_sep = 3;
  vocab_.validate();
}

std::int64_t PlanChainTask::question_space() const {
  return static_cast<std::int64_t>(config_.variants) * config_.plan_max *
         (config_.base - config_.reserved_starts);
}

TokenId PlanChainTask::op_token() const { return 4; }

TokenId PlanChainTask::digit_token(int value) const {
  require(value >= 0 && value < config_.base, Errc::invalid_argument,
          "digit value out of range");
  return static_cast<TokenId>(5 + value);
}

TokenId PlanChainTask::plan_token(int count) const {
  require(count >= 1 && count <= config_.plan_max, Errc::invalid_argument,
          "plan count out of range");
  return static_cast<TokenId>(5 + config_.base + count - 1);
}

TokenId PlanChainTask::variant_token(int variant) const {
  require(variant >= 1 && variant <= config_.variants, Errc::invalid_argument,
          "variant out of range");
  return static_cast<TokenId>(5 + config_.base + config_.plan_max + variant - 1);
}

bool PlanChainTask::is_digit(TokenId t) const {
  return t >= 5 && t < 5 + config_.base;
}

bool PlanChainTask::is_plan(TokenId t) const {
  return t >= 5 + config_.base && t < 5 + config_.base + config_.plan_max;
}

int PlanChainTask::digit_value(TokenId t) const {
  require(is_digit(t), Errc::invalid_token, "not a digit token");
  return t - 5;
}

int PlanChainTask::plan_value(TokenId t) const {
  require(is_plan(t), Errc::invalid_token, "not a plan token");
  return t - 5 - config_.base + 1;
}

int PlanChainTask::apply_op(int value) const {
  if (config_.op.kind == PlanChainOp::Kind::add) {
    return (value + config_.op.operand) % config_.base;
  }
  return (value * config_.op.operand) % config_.base;
}

int PlanChainTask::fold_answer(int plan_len, int start) const {
  int v = start;
  for (int i = 0; i < plan_len; ++i) v = apply_op(v);
  return v;
}

Question PlanChainTask::make_question(int variant, int plan_len, int start) const {
  require(plan_len >= 1 && plan_len <= config_.plan_max, Errc::invalid_argument,
          "plan length out of range");
  require(start >= 0 && start < config_.base, Errc::invalid_argument,
          "start value out of range");
  Question q;
  q.prompt.tokens = {vocab_.bos,         variant_token(variant), op_token(),
                     plan_token(plan_len), digit_token(start),   vocab_.think};
  q.prompt.think_enforced = true;
  q.answer = {digit_token(fold_answer(plan_len, start))};
  const char* kind = config_.op.kind == PlanChainOp::Kind::add ? "add" : "mul";
  q.text = std::string(kind) + std::to_string(config_.op.operand) + " v=" +
           std::to_string(variant) + " r=" + std::to_string(plan_len) + " s=" +
           std::to_string(start);
  return q;
}

std::vector<TokenId> PlanChainTask::expert_trace(int plan_len, int start) const {
  std::vector<TokenId> trace;
  int v = start;
  for (int c = plan_len; c >= 1; --c) {
    trace.push_back(plan_token(c));
    trace.push_back(digit_token(v));
    v = apply_op(v);
  }
  trace.push_back(vocab_.answer_sep);
  trace.push_back(digit_token(v));
  trace.push_back(vocab_.eos);
  return trace;
}

ExpertFn PlanChainTask::expert() const {
  // The expert is a pure function of the last three tokens, so it is exactly
  // representable by an order-3 tabular policy and gives the same target
  // whenever the same context recurs, on-path or off. Unparseable contexts
  // consistently map to eos, which ends stray continuations quickly.
  //
  // Copy *this: the closure must outlive the task object.
  const PlanChainTask task = *this;
  return [task](std::span<const TokenId> history) -> TokenId {
    const Vocabulary& vocab = task.vocab();
    const std::size_t n = history.size();
    auto at = [&](std::size_t back) -> TokenId {
      return back < n ? history[n - 1 - back] : vocab.bos;
    };
    const TokenId a = at(2);
    const TokenId b = at(1);
    const TokenId c = at(0);

    if (c == vocab.eos) return vocab.eos;

    // Plan restatement: [C_r, D_s, think] -> C_r, then [D_s, think, C_r] -> D_s.
    if (c == vocab.think) {
      return (task.is_plan(a) && task.is_digit(b)) ? a : vocab.eos;
    }
    if (b == vocab.think) {
      return (task.is_digit(a) && task.is_plan(c)) ? a : vocab.eos;
    }

    // Answer region: [.., D_v, sep] -> op(v), then [.., sep, D] -> eos.
    if (c == vocab.answer_sep) {
      return task.is_digit(b) ? task.digit_token(task.apply_op(task.digit_value(b)))
                              : vocab.eos;
    }
    if (b == vocab.answer_sep) return vocab.eos;

    // Countdown: [.., C_j, D_v] -> C_{j-1}, or sep once the plan is spent.
    if (task.is_plan(b) && task.is_digit(c)) {
      const int j = task.plan_value(b);
      return j <= 1 ? vocab.answer_sep : task.plan_token(j - 1);
    }
    // Value update: [.., D_v, C_j] -> op(v).
    if (task.is_digit(b) && task.is_plan(c)) {
      return task.digit_token(task.apply_op(task.digit_value(b)));
    }
    return vocab.eos;
  };
}

SmoothedExpertPolicy PlanChainTask::make_teacher(double epsilon) const {
  return SmoothedExpertPolicy(vocab_, expert(), epsilon);
}

std::vector<std::vector<TokenId>> PlanChainTask::pretrain_corpus() const {
  require(config_.reserved_starts >= 1, Errc::invalid_argument,
          "pretraining needs at least one reserved start value");
  std::vector<std::vector<TokenId>> corpus;
  for (int r = 1; r <= config_.plan_max; ++r) {
    for (int s = 0; s < config_.reserved_starts; ++s) {
      const Question q = make_question(1, r, s);
      std::vector<TokenId> seq = q.prompt.tokens;
      const std::vector<TokenId> trace = expert_trace(r, s);
      seq.insert(seq.end(), trace.begin(), trace.end());
      corpus.push_back(std::move(seq));
    }
  }
  return corpus;
}

// ============================================================================
// Datasets
// ============================================================================

DatasetSplits make_dataset(const PlanChainTask& task, int n_train, int n_dev, int n_test,
                           std::uint64_t seed) {
  require(n_train >= 1 && n_dev >= 1 && n_test >= 1, Errc::invalid_argument,
          "split sizes must be >= 1");
  const std::int64_t space = task.question_space();
  const std::int64_t want = static_cast<std::int64_t>(n_train) + n_dev + n_test;
  require(want <= space, Errc::exhausted_space,
          "requested " + std::to_string(want) + " questions from a space of " +
              std::to_string(space));

  std::vector<std::int64_t> order(static_cast<std::size_t>(space));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng rng(derive_seed(seed, {stream::dataset}));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }

  const int usable_starts = task.config().base - task.config().reserved_starts;
  auto question_at = [&](std::int64_t flat) {
    const int start =
        task.config().reserved_starts + static_cast<int>(flat % usable_starts);
    const std::int64_t rest = flat / usable_starts;
    const int plan_len = static_cast<int>(rest % task.config().plan_max) + 1;
    const int variant = static_cast<int>(rest / task.config().plan_max) + 1;
    return task.make_question(variant, plan_len, start);
  };

  DatasetSplits splits;
  std::size_t pos = 0;
  for (int i = 0; i < n_train; ++i) splits.train.push_back(question_at(order[pos++]));
  for (int i = 0; i < n_dev; ++i) splits.dev.push_back(question_at(order[pos++]));
  for (int i = 0; i < n_test; ++i) splits.test.push_back(question_at(order[pos++]));
  return splits;
}

// ============================================================================
// Off-policy corpus
// ============================================================================

OffPolicyCorpus build_offpolicy_corpus(const Policy& teacher,
                                       std::span<const Question> questions,
                                       int samples_per_question, std::int64_t cap,
                                       std::uint64_t seed) {
  require(!questions.empty(), Errc::empty_input, "no questions");
  require(samples_per_question >= 1, Errc::invalid_argument,
          "samples_per_question must be >= 1");
  OffPolicyCorpus corpus;
  corpus.reserve(questions.size() * static_cast<std::size_t>(samples_per_question));
  SamplingConfig cfg;  // raw sampling: recorded logprobs replay exactly
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    for (int j = 0; j < samples_per_question; ++j) {
      Rng rng(derive_seed(seed, {stream::corpus, static_cast<std::uint64_t>(qi),
                                 static_cast<std::uint64_t>(j)}));
      CorpusRecord record;
      record.question = questions[qi];
      record.trajectory = generate(teacher, questions[qi].prompt, cap, cfg, rng);
      corpus.push_back(std::move(record));
    }
  }
  return corpus;
}

namespace {

nlohmann::json question_to_json(const Question& q) {
  return nlohmann::json{
      {"prompt", q.prompt.tokens},
      {"think_enforced", q.prompt.think_enforced},
      {"answer", q.answer},
      {"text", q.text},
  };
}

Question question_from_json(const nlohmann::json& j) {
  Question q;
  q.prompt.tokens = j.at("prompt").get<std::vector<TokenId>>();
  q.prompt.think_enforced = j.at("think_enforced").get<bool>();
  q.answer = j.at("answer").get<std::vector<TokenId>>();
  q.text = j.at("text").get<std::string>();
  return q;
}

}  // namespace

void write_corpus_jsonl(std::ostream& out, const OffPolicyCorpus& corpus) {
  for (const CorpusRecord& r : corpus) {
    nlohmann::json j{
        {"question", question_to_json(r.question)},
        {"trajectory",
         {{"prompt_len", r.trajectory.prompt_len},
          {"tokens", r.trajectory.tokens},
          {"sampler_logprobs", r.trajectory.sampler_logprobs},
          {"cap_used", r.trajectory.cap_used},
          {"termination", r.trajectory.termination == Termination::eos ? "eos" : "cap"}}},
    };
    out << j.dump() << '\n';
  }
}

OffPolicyCorpus read_corpus_jsonl(std::istream& in) {
  OffPolicyCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    CorpusRecord r;
    r.question = question_from_json(j.at("question"));
    const nlohmann::json& t = j.at("trajectory");
    r.trajectory.prompt_len = t.at("prompt_len").get<std::int32_t>();
    r.trajectory.tokens = t.at("tokens").get<std::vector<TokenId>>();
    r.trajectory.sampler_logprobs = t.at("sampler_logprobs").get<std::vector<double>>();
    r.trajectory.cap_used = t.at("cap_used").get<std::int64_t>();
    const std::string term = t.at("termination").get<std::string>();
    require(term == "eos" || term == "cap", Errc::invalid_data,
            "unknown termination '" + term + "'");
    r.trajectory.termination = term == "eos" ? Termination::eos : Termination::cap;
    corpus.push_back(std::move(r));
  }
  return corpus;
}

}  // namespace opd
