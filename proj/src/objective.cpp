#include "opd/objective.hpp"

#include "opd/table.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace opd {

// ============================================================================
// MaskSpec
// ============================================================================

MaskSpec MaskSpec::Prefix(std::int64_t len) {
  MaskSpec m;
  m.kind = Kind::prefix;
  m.prefix_len = len;
  m.validate();
  return m;
}

MaskSpec MaskSpec::Window(std::int64_t begin, std::int64_t end) {
  MaskSpec m;
  m.kind = Kind::window;
  m.window_begin = begin;
  m.window_end = end;
  m.validate();
  return m;
}

MaskSpec MaskSpec::Tail(std::int64_t len) {
  MaskSpec m;
  m.kind = Kind::tail;
  m.tail_len = len;
  m.validate();
  return m;
}

void MaskSpec::validate() const {
  switch (kind) {
    case Kind::full:
      return;
    case Kind::prefix:
      require(prefix_len >= 0, Errc::invalid_mask, "prefix length must be >= 0");
      return;
    case Kind::window:
      require(window_begin >= 0 && window_begin < window_end, Errc::invalid_mask,
              "window requires 0 <= begin < end");
      return;
    case Kind::tail:
      require(tail_len >= 1, Errc::invalid_mask, "tail length must be >= 1");
      return;
  }
  fail(Errc::invalid_mask, "unknown mask kind");
}

std::string MaskSpec::label() const {
  switch (kind) {
    case Kind::full: return "full";
    case Kind::prefix: return "prefix" + std::to_string(prefix_len);
    case Kind::window:
      return "window" + std::to_string(window_begin) + "-" + std::to_string(window_end);
    case Kind::tail: return "tail" + std::to_string(tail_len);
  }
  return "?";
}

std::vector<double> apply_mask(std::int64_t generated_len, const MaskSpec& spec) {
  require(generated_len >= 0, Errc::invalid_argument, "generated length must be >= 0");
  spec.validate();
  std::vector<double> w(static_cast<std::size_t>(generated_len), 0.0);
  std::int64_t begin = 0;
  std::int64_t end = generated_len;
  switch (spec.kind) {
    case MaskSpec::Kind::full:
      break;
    case MaskSpec::Kind::prefix:
      end = std::min(spec.prefix_len, generated_len);
      break;
    case MaskSpec::Kind::window:
      begin = std::min(spec.window_begin, generated_len);
      end = std::min(spec.window_end, generated_len);
      break;
    case MaskSpec::Kind::tail:
      begin = std::max<std::int64_t>(0, generated_len - spec.tail_len);
      break;
  }
  for (std::int64_t i = begin; i < end; ++i) w[static_cast<std::size_t>(i)] = 1.0;
  return w;
}

// ============================================================================
// DivergenceConfig
// ============================================================================

void DivergenceConfig::validate() const {
  require(beta >= 0.0 && beta <= 1.0, Errc::invalid_argument, "beta must lie in [0, 1]");
  require(lambda_onpolicy >= 0.0 && lambda_onpolicy <= 1.0, Errc::invalid_argument,
          "lambda must lie in [0, 1]");
  if (estimator == Estimator::sampled) {
    require(beta == 1.0, Errc::invalid_argument,
            "the sampled estimator is reverse-KL only (beta = 1); "
            "use the full_distribution estimator for beta < 1");
  }
}

// ============================================================================
// Scoring
// ============================================================================

ScoredTrajectory score_trajectory(const Policy& student, const Policy& teacher,
                                  const Trajectory& trajectory, const MaskSpec& mask) {
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");
  const std::int64_t gen = trajectory.generated_len();
  require(gen >= 0, Errc::invalid_data, "trajectory shorter than its prompt");

  ScoredTrajectory s;
  s.base = trajectory;
  s.student_logprobs.resize(static_cast<std::size_t>(gen));
  s.teacher_logprobs.resize(static_cast<std::size_t>(gen));
  s.is_weights.resize(static_cast<std::size_t>(gen));
  s.advantages.resize(static_cast<std::size_t>(gen));
  s.mask = apply_mask(gen, mask);

  for (std::int64_t t = 0; t < gen; ++t) {
    const std::size_t pos = static_cast<std::size_t>(trajectory.prompt_len + t);
    const std::span<const TokenId> ctx(trajectory.tokens.data(), pos);
    const TokenId x = trajectory.tokens[pos];
    const double slp = s.student_logprobs[t] = student.log_prob(ctx, x);
    const double tlp = s.teacher_logprobs[t] = teacher.log_prob(ctx, x);
    s.is_weights[t] = std::exp(slp - trajectory.sampler_logprobs[t]);
    s.advantages[t] = tlp - slp;
  }
  return s;
}

ScoredTrajectory score_trajectory_onpolicy(const Policy& student, const Policy& teacher,
                                           const Trajectory& trajectory,
                                           const MaskSpec& mask) {
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");
  const std::int64_t gen = trajectory.generated_len();
  require(gen >= 0, Errc::invalid_data, "trajectory shorter than its prompt");

  ScoredTrajectory s;
  s.base = trajectory;
  s.student_logprobs = trajectory.sampler_logprobs;
  s.teacher_logprobs.resize(static_cast<std::size_t>(gen));
  s.is_weights.assign(static_cast<std::size_t>(gen), 1.0);
  s.advantages.resize(static_cast<std::size_t>(gen));
  s.mask = apply_mask(gen, mask);

  for (std::int64_t t = 0; t < gen; ++t) {
    const std::size_t pos = static_cast<std::size_t>(trajectory.prompt_len + t);
    const std::span<const TokenId> ctx(trajectory.tokens.data(), pos);
    const double tlp = s.teacher_logprobs[t] = teacher.log_prob(ctx, trajectory.tokens[pos]);
    s.advantages[t] = tlp - s.student_logprobs[t];
  }
  return s;
}

double kl_estimate(std::span<const ScoredTrajectory> batch) {
  require(!batch.empty(), Errc::empty_input, "empty batch");
  double total = 0.0;
  for (const ScoredTrajectory& s : batch) {
    double seq = 0.0;
    for (std::size_t t = 0; t < s.mask.size(); ++t) {
      if (s.mask[t] == 0.0) continue;
      seq += s.student_logprobs[t] - s.teacher_logprobs[t];
    }
    total += seq;
  }
  return total / static_cast<double>(batch.size());
}

SparseLogitGrad surrogate_gradient(const KGramPolicy& student,
                                   std::span<const ScoredTrajectory> batch) {
  require(!batch.empty(), Errc::empty_input, "empty batch");
  SparseLogitGrad grad;
  grad.vocab_size = student.vocab().size;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t v = static_cast<std::size_t>(student.vocab().size);

  // Contexts repeat heavily within a batch; the row softmax is cached so each
  // distinct row is materialized once.
  std::unordered_map<std::int64_t, std::vector<double>> softmax_cache;
  for (const ScoredTrajectory& s : batch) {
    const Trajectory& traj = s.base;
    for (std::size_t t = 0; t < s.mask.size(); ++t) {
      if (s.mask[t] == 0.0) continue;
      const std::size_t pos = static_cast<std::size_t>(traj.prompt_len) + t;
      const std::span<const TokenId> ctx(traj.tokens.data(), pos);
      const std::int64_t row = student.context_index(ctx);
      auto cached = softmax_cache.find(row);
      if (cached == softmax_cache.end()) {
        cached = softmax_cache.emplace(row, student.row_softmax(row)).first;
      }
      const std::vector<double>& p = cached->second;
      const double scale = -inv_n * s.is_weights[t] * s.advantages[t];

      auto acc = grad.rows.find(row);
      if (acc == grad.rows.end()) {
        acc = grad.rows.emplace(row, std::vector<double>(v, 0.0)).first;
      }
      std::vector<double>& dst = acc->second;
      for (std::size_t i = 0; i < v; ++i) dst[i] -= scale * p[i];
      dst[static_cast<std::size_t>(traj.tokens[pos])] += scale;
    }
  }
  return grad;
}

// ============================================================================
// Full-distribution divergence
// ============================================================================

PerPositionDivergence full_distribution_divergence(const KGramPolicy& student,
                                                   const Policy& teacher,
                                                   const Trajectory& trajectory,
                                                   const MaskSpec& mask, double beta) {
  require(student.vocab() == teacher.vocab(), Errc::incompatible_policies,
          "student and teacher must share a vocabulary");
  require(beta >= 0.0 && beta <= 1.0, Errc::invalid_argument, "beta must lie in [0, 1]");

  const std::int64_t gen = trajectory.generated_len();
  const std::int32_t v = student.vocab().size;
  PerPositionDivergence out;
  out.values.assign(static_cast<std::size_t>(gen), 0.0);
  out.grad.vocab_size = v;
  const std::vector<double> weights = apply_mask(gen, mask);
  std::vector<double> row_grad(static_cast<std::size_t>(v));

  for (std::int64_t t = 0; t < gen; ++t) {
    if (weights[static_cast<std::size_t>(t)] == 0.0) continue;
    const std::size_t pos = static_cast<std::size_t>(trajectory.prompt_len + t);
    const std::span<const TokenId> ctx(trajectory.tokens.data(), pos);
    const std::int64_t row = student.context_index(ctx);
    const std::vector<double> p = student.row_softmax(row);
    const std::vector<double> q = teacher.next_distribution(ctx);

    double rev = 0.0;  // KL(student || teacher)
    double fwd = 0.0;  // KL(teacher || student)
    for (std::int32_t x = 0; x < v; ++x) {
      const double lr = std::log(p[x]) - std::log(q[x]);
      rev += p[x] * lr;
      fwd -= q[x] * lr;
    }
    out.values[static_cast<std::size_t>(t)] = beta * rev + (1.0 - beta) * fwd;

    // d rev / d z_j = p_j ((log p_j - log q_j) - rev)
    // d fwd / d z_j = p_j - q_j
    for (std::int32_t x = 0; x < v; ++x) {
      const double lr = std::log(p[x]) - std::log(q[x]);
      row_grad[x] = beta * p[x] * (lr - rev) + (1.0 - beta) * (p[x] - q[x]);
    }
    out.grad.add_scaled(row, row_grad, 1.0);
  }
  return out;
}

void write_token_records(std::ostream& out, std::span<const ScoredTrajectory> batch) {
  out << "trajectory\tposition\tstudent_logprob\tteacher_logprob\tis_weight\tadvantage\tmask\n";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ScoredTrajectory& s = batch[i];
    for (std::size_t t = 0; t < s.mask.size(); ++t) {
      out << i << '\t' << t << '\t' << format_double(s.student_logprobs[t]) << '\t'
          << format_double(s.teacher_logprobs[t]) << '\t' << format_double(s.is_weights[t])
          << '\t' << format_double(s.advantages[t]) << '\t'
          << static_cast<int>(s.mask[t]) << '\n';
    }
  }
}

}  // namespace opd
