#include "opd/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <thread>

#include <json.hpp>

namespace opd {

void Prompt::validate(const Vocabulary& vocab) const {
  require(!tokens.empty() && tokens.front() == vocab.bos, Errc::invalid_argument,
          "prompt must begin with bos");
  for (TokenId t : tokens) {
    require(t >= 0 && t < vocab.size, Errc::invalid_token,
            "prompt token " + std::to_string(t) + " out of range");
  }
  if (think_enforced) {
    require(tokens.back() == vocab.think, Errc::invalid_argument,
            "think-enforced prompt must end with the think token");
  }
}

std::vector<double> reshape_distribution(std::span<const double> probs,
                                         double temperature, double top_p) {
  require(temperature > 0.0, Errc::invalid_argument, "temperature must be positive");
  require(top_p > 0.0 && top_p <= 1.0, Errc::invalid_argument, "top_p must lie in (0, 1]");

  const std::size_t n = probs.size();
  std::vector<double> q(probs.begin(), probs.end());
  if (temperature != 1.0) {
    // softmax(log p / T), computed with max subtraction.
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) logits[i] = std::log(q[i]) / temperature;
    softmax_into(logits, q);
  }
  if (top_p < 1.0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (q[a] != q[b]) return q[a] > q[b];
      return a < b;
    });
    double mass = 0.0;
    std::size_t kept = 0;
    for (; kept < n; ++kept) {
      mass += q[order[kept]];
      if (mass >= top_p) {
        ++kept;
        break;
      }
    }
    std::vector<double> trimmed(n, 0.0);
    for (std::size_t i = 0; i < kept; ++i) {
      trimmed[order[i]] = q[order[i]] / mass;
    }
    q = std::move(trimmed);
  }
  return q;
}

namespace {

std::size_t sample_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  std::size_t last_positive = 0;
  bool seen = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    seen = true;
    if (u < acc) return i;
  }
  require(seen, Errc::invalid_argument, "sampling from an all-zero distribution");
  return last_positive;  // cumulative mass fell short of u by rounding
}

Trajectory run_generation(const Policy& policy, std::vector<TokenId> history,
                          std::int32_t prompt_len, std::int64_t cap,
                          const SamplingConfig& cfg, Rng& rng) {
  require(cap >= 0, Errc::invalid_cap, "generation cap must be >= 0");
  const bool raw = cfg.temperature == 1.0 && cfg.top_p == 1.0;
  const TokenId eos = policy.vocab().eos;
  const auto* kgram = dynamic_cast<const KGramPolicy*>(&policy);

  Trajectory traj;
  traj.prompt_len = prompt_len;
  traj.cap_used = cap;
  traj.tokens = std::move(history);
  traj.termination = Termination::cap;

  // A prompt/prefix already ending in eos absorbs immediately.
  if (!traj.tokens.empty() && traj.tokens.back() == eos) {
    traj.termination = Termination::eos;
    return traj;
  }

  std::vector<double> dist(static_cast<std::size_t>(policy.vocab().size));
  for (std::int64_t step = 0; step < cap; ++step) {
    TokenId token;
    double lp;
    if (raw && kgram) {
      // One softmax pass yields both the sampling distribution and the
      // log-normalizer; lp matches log_prob() bit for bit.
      const std::span<const double> logits = kgram->row(kgram->context_index(traj.tokens));
      const double lse = softmax_lse_into(logits, dist);
      token = static_cast<TokenId>(sample_index(dist, rng.next_unit()));
      lp = logits[static_cast<std::size_t>(token)] - lse;
    } else if (raw) {
      policy.next_distribution_into(traj.tokens, dist);
      token = static_cast<TokenId>(sample_index(dist, rng.next_unit()));
      lp = policy.log_prob(traj.tokens, token);
    } else {
      policy.next_distribution_into(traj.tokens, dist);
      const std::vector<double> reshaped =
          reshape_distribution(dist, cfg.temperature, cfg.top_p);
      token = static_cast<TokenId>(sample_index(reshaped, rng.next_unit()));
      lp = std::log(reshaped[static_cast<std::size_t>(token)]);
    }
    traj.tokens.push_back(token);
    traj.sampler_logprobs.push_back(lp);
    if (token == eos) {
      traj.termination = Termination::eos;
      break;
    }
  }
  return traj;
}

}  // namespace

Trajectory generate(const Policy& policy, const Prompt& prompt, std::int64_t cap,
                    const SamplingConfig& cfg, Rng& rng) {
  prompt.validate(policy.vocab());
  return run_generation(policy, prompt.tokens,
                        static_cast<std::int32_t>(prompt.tokens.size()), cap, cfg, rng);
}

Trajectory continue_from_prefix(const Policy& policy, const Prompt& prompt,
                                std::span<const TokenId> prefix, std::int64_t cap,
                                const SamplingConfig& cfg, Rng& rng) {
  prompt.validate(policy.vocab());
  const Vocabulary& vocab = policy.vocab();
  std::vector<TokenId> history = prompt.tokens;
  for (TokenId t : prefix) {
    require(t >= 0 && t < vocab.size, Errc::invalid_token,
            "prefix token " + std::to_string(t) + " out of range");
    history.push_back(t);
    if (t == vocab.eos) break;  // eos is absorbing; drop anything past it
  }
  return run_generation(policy, std::move(history),
                        static_cast<std::int32_t>(history.size()), cap, cfg, rng);
}

std::vector<Trajectory> generate_batch(const Policy& policy,
                                       std::span<const Prompt> prompts,
                                       int samples_per_prompt, std::int64_t cap,
                                       const SamplingConfig& cfg, int workers) {
  require(!prompts.empty(), Errc::empty_input, "no prompts to sample from");
  require(samples_per_prompt >= 1, Errc::invalid_argument,
          "samples_per_prompt must be >= 1");
  require(cap >= 0, Errc::invalid_cap, "generation cap must be >= 0");

  const std::size_t total = prompts.size() * static_cast<std::size_t>(samples_per_prompt);
  std::vector<Trajectory> out(total);

  auto run_slot = [&](std::size_t slot) {
    const std::size_t p = slot / static_cast<std::size_t>(samples_per_prompt);
    const std::size_t k = slot % static_cast<std::size_t>(samples_per_prompt);
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(k)}));
    out[slot] = generate(policy, prompts[p], cap, cfg, rng);
  };

  if (workers <= 1 || total <= 1) {
    for (std::size_t slot = 0; slot < total; ++slot) run_slot(slot);
    return out;
  }

  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), total);
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t w = 0; w < n_threads; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t slot = w; slot < total; slot += n_threads) run_slot(slot);
    });
  }
  for (std::thread& t : pool) t.join();
  return out;
}

// ============================================================================
// Serialization
// ============================================================================

namespace {

nlohmann::json trajectory_to_json(const Trajectory& t) {
  return nlohmann::json{
      {"prompt_len", t.prompt_len},
      {"tokens", t.tokens},
      {"sampler_logprobs", t.sampler_logprobs},
      {"cap_used", t.cap_used},
      {"termination", t.termination == Termination::eos ? "eos" : "cap"},
  };
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.prompt_len = j.at("prompt_len").get<std::int32_t>();
  t.tokens = j.at("tokens").get<std::vector<TokenId>>();
  t.sampler_logprobs = j.at("sampler_logprobs").get<std::vector<double>>();
  t.cap_used = j.at("cap_used").get<std::int64_t>();
  const std::string term = j.at("termination").get<std::string>();
  require(term == "eos" || term == "cap", Errc::invalid_data,
          "unknown termination '" + term + "'");
  t.termination = term == "eos" ? Termination::eos : Termination::cap;
  require(t.generated_len() >= 0 &&
              t.sampler_logprobs.size() == static_cast<std::size_t>(t.generated_len()),
          Errc::invalid_data, "trajectory record is inconsistent");
  return t;
}

}  // namespace

void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> trajectories) {
  for (const Trajectory& t : trajectories) {
    out << trajectory_to_json(t).dump() << '\n';
  }
}

std::vector<Trajectory> read_trajectories_jsonl(std::istream& in) {
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace opd
