#pragma once

/**
 * Trajectory sampling with training-time early termination.
 *
 * generate() early-stops after `cap` generated tokens; eos is absorbing. Each
 * generated token consumes exactly one uniform draw from the stream, so a
 * trajectory sampled with cap C replayed with cap C' > C on the same stream
 * extends it token-for-token.
 *
 * sampler_logprobs record the distribution actually sampled from. With
 * temperature 1 / top_p 1 no reshaping happens and the recorded value is the
 * raw policy log_prob bit-for-bit, which is what makes importance weights
 * exactly 1 in the on-policy case.
 */

#include "opd/policy.hpp"
#include "opd/rng.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace opd {

struct Prompt {
  std::vector<TokenId> tokens;
  bool think_enforced = true;

  void validate(const Vocabulary& vocab) const;
};

enum class Termination { eos, cap };

struct Trajectory {
  std::int32_t prompt_len = 0;
  std::vector<TokenId> tokens;          // prompt followed by generated tokens
  std::vector<double> sampler_logprobs; // one per generated token
  std::int64_t cap_used = 0;
  Termination termination = Termination::cap;

  std::int64_t generated_len() const {
    return static_cast<std::int64_t>(tokens.size()) - prompt_len;
  }
  std::span<const TokenId> generated() const {
    return {tokens.data() + prompt_len, static_cast<std::size_t>(generated_len())};
  }
};

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  std::uint64_t seed = 0;
};

/// Distribution after temperature / top-p reshaping. Top-p keeps the smallest
/// set (descending probability, ties to the lower token id) whose mass
/// reaches p, then renormalizes; everything else gets probability 0.
std::vector<double> reshape_distribution(std::span<const double> probs,
                                         double temperature, double top_p);

Trajectory generate(const Policy& policy, const Prompt& prompt, std::int64_t cap,
                    const SamplingConfig& cfg, Rng& rng);

/// prompts.size() * samples_per_prompt trajectories in prompt-major order.
/// Stream for pair (p, k) derives from (cfg.seed, p, k); collection order is
/// fixed regardless of worker count.
std::vector<Trajectory> generate_batch(const Policy& policy,
                                       std::span<const Prompt> prompts,
                                       int samples_per_prompt, std::int64_t cap,
                                       const SamplingConfig& cfg, int workers = 1);

/// generate() conditioned on prompt + prefix; prompt_len covers both. A prefix
/// containing eos is cut just past the first eos and yields no new tokens.
Trajectory continue_from_prefix(const Policy& policy, const Prompt& prompt,
                                std::span<const TokenId> prefix, std::int64_t cap,
                                const SamplingConfig& cfg, Rng& rng);

// Line-delimited records, one JSON object per trajectory.
void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_trajectories_jsonl(std::istream& in);

}  // namespace opd
