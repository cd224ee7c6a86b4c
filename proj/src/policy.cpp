#include "opd/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace opd {

// ============================================================================
// Vocabulary
// ============================================================================

void Vocabulary::validate() const {
  require(size >= 4, Errc::invalid_argument,
          "vocabulary must hold the four special tokens, got size " + std::to_string(size));
  const TokenId ids[4] = {bos, eos, think, answer_sep};
  for (TokenId id : ids) {
    require(id >= 0 && id < size, Errc::invalid_argument,
            "special token id " + std::to_string(id) + " out of range");
  }
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      require(ids[i] != ids[j], Errc::invalid_argument, "special token ids must be distinct");
    }
  }
}

// ============================================================================
// Numerics
// ============================================================================

double log_sum_exp(std::span<const double> values) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

void softmax_into(std::span<const double> logits, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= s;
}

double softmax_lse_into(std::span<const double> logits, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= s;
  return m + std::log(s);
}

// ============================================================================
// Policy base
// ============================================================================

void Policy::check_history(std::span<const TokenId> history) const {
  const Vocabulary& v = vocab();
  require(!history.empty() && history.front() == v.bos, Errc::invalid_argument,
          "history must begin with bos");
  for (TokenId t : history) {
    require(t >= 0 && t < v.size, Errc::invalid_token,
            "token id " + std::to_string(t) + " out of range for vocabulary of size " +
                std::to_string(v.size));
  }
}

double Policy::log_prob(std::span<const TokenId> history, TokenId next) const {
  require(next >= 0 && next < vocab().size, Errc::invalid_token,
          "next token id " + std::to_string(next) + " out of range");
  return std::log(next_distribution(history)[static_cast<std::size_t>(next)]);
}

void Policy::next_distribution_into(std::span<const TokenId> history,
                                    std::span<double> out) const {
  const std::vector<double> dist = next_distribution(history);
  require(out.size() == dist.size(), Errc::invalid_argument, "output span size mismatch");
  std::copy(dist.begin(), dist.end(), out.begin());
}

// ============================================================================
// SparseLogitGrad
// ============================================================================

void SparseLogitGrad::add_scaled(std::int64_t row, std::span<const double> values,
                                 double scale) {
  auto it = rows.find(row);
  if (it == rows.end()) {
    it = rows.emplace(row, std::vector<double>(vocab_size, 0.0)).first;
  }
  std::vector<double>& acc = it->second;
  for (std::size_t i = 0; i < values.size(); ++i) acc[i] += scale * values[i];
}

void SparseLogitGrad::scale(double factor) {
  for (auto& [row, values] : rows) {
    for (double& v : values) v *= factor;
  }
}

std::vector<double> SparseLogitGrad::dense(std::int64_t row_count) const {
  std::vector<double> out;
  dense_into(row_count, out);
  return out;
}

void SparseLogitGrad::dense_into(std::int64_t row_count, std::vector<double>& out) const {
  out.assign(static_cast<std::size_t>(row_count) * vocab_size, 0.0);
  for (const auto& [row, values] : rows) {
    std::copy(values.begin(), values.end(),
              out.begin() + static_cast<std::ptrdiff_t>(row * vocab_size));
  }
}

// ============================================================================
// KGramPolicy
// ============================================================================

namespace {

std::int64_t pow_i64(std::int64_t base, int exp) {
  std::int64_t r = 1;
  for (int i = 0; i < exp; ++i) {
    require(r <= (std::int64_t{1} << 62) / base, Errc::invalid_argument,
            "k-gram table too large");
    r *= base;
  }
  return r;
}

}  // namespace

KGramPolicy::KGramPolicy(const Vocabulary& vocab, int order)
    : vocab_(vocab), order_(order) {
  vocab_.validate();
  require(order_ >= 1, Errc::invalid_argument, "policy order must be >= 1");
  rows_ = pow_i64(vocab_.size, order_);
  logits_.assign(static_cast<std::size_t>(rows_) * vocab_.size, 0.0);
}

KGramPolicy::KGramPolicy(const Vocabulary& vocab, int order, std::vector<double> logits)
    : KGramPolicy(vocab, order) {
  require(logits.size() == logits_.size(), Errc::invalid_argument,
          "logit table size mismatch: got " + std::to_string(logits.size()) + ", expected " +
              std::to_string(logits_.size()));
  logits_ = std::move(logits);
}

KGramPolicy KGramPolicy::random(const Vocabulary& vocab, int order, double stddev,
                                std::uint64_t seed) {
  KGramPolicy p(vocab, order);
  Rng rng(derive_seed(seed, {stream::init}));
  for (double& v : p.logits_) v = stddev * rng.next_gaussian();
  return p;
}

std::int64_t KGramPolicy::context_index(std::span<const TokenId> history) const {
  check_history(history);
  std::int64_t idx = 0;
  const std::int64_t n = static_cast<std::int64_t>(history.size());
  for (int i = order_; i >= 1; --i) {
    const std::int64_t pos = n - i;
    const TokenId t = pos >= 0 ? history[static_cast<std::size_t>(pos)] : vocab_.bos;
    idx = idx * vocab_.size + t;
  }
  return idx;
}

std::span<const double> KGramPolicy::row(std::int64_t context) const {
  return {logits_.data() + context * vocab_.size, static_cast<std::size_t>(vocab_.size)};
}

std::vector<double> KGramPolicy::row_softmax(std::int64_t context) const {
  std::vector<double> out(static_cast<std::size_t>(vocab_.size));
  softmax_into(row(context), out);
  return out;
}

std::vector<double> KGramPolicy::next_distribution(std::span<const TokenId> history) const {
  return row_softmax(context_index(history));
}

void KGramPolicy::next_distribution_into(std::span<const TokenId> history,
                                         std::span<double> out) const {
  softmax_into(row(context_index(history)), out);
}

double KGramPolicy::log_prob(std::span<const TokenId> history, TokenId next) const {
  require(next >= 0 && next < vocab_.size, Errc::invalid_token,
          "next token id " + std::to_string(next) + " out of range");
  const std::int64_t ctx = context_index(history);
  const std::span<const double> r = row(ctx);
  return r[static_cast<std::size_t>(next)] - log_sum_exp(r);
}

RowGrad KGramPolicy::grad_log_prob(std::span<const TokenId> history, TokenId next) const {
  require(next >= 0 && next < vocab_.size, Errc::invalid_token,
          "next token id " + std::to_string(next) + " out of range");
  RowGrad g;
  g.row = context_index(history);
  g.values = row_softmax(g.row);
  for (double& v : g.values) v = -v;
  g.values[static_cast<std::size_t>(next)] += 1.0;
  return g;
}

// ============================================================================
// Checkpoint format
//
// magic "POPD" | u32 version | u32 V | u32 k | u32 bos,eos,think,answer_sep |
// V^k * V logits as little-endian IEEE-754 doubles, row-major by context.
// ============================================================================

namespace {

constexpr char kMagic[4] = {'P', 'O', 'P', 'D'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& buf, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double get_f64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return std::bit_cast<double>(v);
}

}  // namespace

void KGramPolicy::save(const std::string& path) const {
  std::string buf;
  buf.reserve(24 + logits_.size() * 8);
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(vocab_.size));
  put_u32(buf, static_cast<std::uint32_t>(order_));
  put_u32(buf, static_cast<std::uint32_t>(vocab_.bos));
  put_u32(buf, static_cast<std::uint32_t>(vocab_.eos));
  put_u32(buf, static_cast<std::uint32_t>(vocab_.think));
  put_u32(buf, static_cast<std::uint32_t>(vocab_.answer_sep));
  for (double d : logits_) put_f64(buf, d);

  std::ofstream out(path, std::ios::binary);
  require(out.good(), Errc::io_error, "cannot open checkpoint for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  require(out.good(), Errc::io_error, "short write to checkpoint: " + path);
}

KGramPolicy KGramPolicy::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io_error, "cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(buf.size() >= 32, Errc::io_error, "checkpoint truncated: " + path);
  require(std::memcmp(buf.data(), kMagic, 4) == 0, Errc::io_error,
          "bad checkpoint magic: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + 4;
  const std::uint32_t version = get_u32(p);
  require(version == kVersion, Errc::io_error,
          "unsupported checkpoint version " + std::to_string(version));
  Vocabulary vocab;
  vocab.size = static_cast<std::int32_t>(get_u32(p + 4));
  const int order = static_cast<int>(get_u32(p + 8));
  vocab.bos = static_cast<TokenId>(get_u32(p + 12));
  vocab.eos = static_cast<TokenId>(get_u32(p + 16));
  vocab.think = static_cast<TokenId>(get_u32(p + 20));
  vocab.answer_sep = static_cast<TokenId>(get_u32(p + 24));

  KGramPolicy policy(vocab, order);
  const std::size_t expected = 32 + policy.logits_.size() * 8;
  require(buf.size() == expected, Errc::io_error,
          "checkpoint size mismatch: " + path + " (" + std::to_string(buf.size()) +
              " bytes, expected " + std::to_string(expected) + ")");
  const unsigned char* data = reinterpret_cast<const unsigned char*>(buf.data()) + 32;
  for (std::size_t i = 0; i < policy.logits_.size(); ++i) {
    policy.logits_[i] = get_f64(data + 8 * i);
  }
  return policy;
}

// ============================================================================
// SmoothedExpertPolicy
// ============================================================================

SmoothedExpertPolicy::SmoothedExpertPolicy(const Vocabulary& vocab, ExpertFn expert,
                                           double epsilon)
    : vocab_(vocab), expert_(std::move(expert)), epsilon_(epsilon) {
  vocab_.validate();
  require(epsilon_ > 0.0 && epsilon_ < 1.0, Errc::invalid_argument,
          "smoothing epsilon must lie in (0, 1)");
  require(static_cast<bool>(expert_), Errc::invalid_argument, "expert function required");
}

TokenId SmoothedExpertPolicy::expert_token(std::span<const TokenId> history) const {
  check_history(history);
  const TokenId t = expert_(history);
  require(t >= 0 && t < vocab_.size, Errc::invalid_token,
          "expert returned out-of-range token " + std::to_string(t));
  return t;
}

std::vector<double> SmoothedExpertPolicy::next_distribution(
    std::span<const TokenId> history) const {
  const TokenId t = expert_token(history);
  const double floor = epsilon_ / vocab_.size;
  std::vector<double> p(static_cast<std::size_t>(vocab_.size), floor);
  p[static_cast<std::size_t>(t)] = 1.0 - epsilon_ + floor;
  return p;
}

void SmoothedExpertPolicy::next_distribution_into(std::span<const TokenId> history,
                                                  std::span<double> out) const {
  const TokenId t = expert_token(history);
  const double floor = epsilon_ / vocab_.size;
  std::fill(out.begin(), out.end(), floor);
  out[static_cast<std::size_t>(t)] = 1.0 - epsilon_ + floor;
}

double SmoothedExpertPolicy::log_prob(std::span<const TokenId> history, TokenId next) const {
  require(next >= 0 && next < vocab_.size, Errc::invalid_token,
          "next token id " + std::to_string(next) + " out of range");
  const TokenId t = expert_token(history);
  const double floor = epsilon_ / vocab_.size;
  return std::log(next == t ? 1.0 - epsilon_ + floor : floor);
}

// ============================================================================
// Free functions
// ============================================================================

RowGrad grad_log_prob(const Policy& policy, std::span<const TokenId> history, TokenId next) {
  const auto* kgram = dynamic_cast<const KGramPolicy*>(&policy);
  require(kgram != nullptr, Errc::unsupported_policy,
          "exact logit gradients exist only for tabular k-gram policies");
  return kgram->grad_log_prob(history, next);
}

double corpus_nll(const Policy& policy, std::span<const std::vector<TokenId>> corpus) {
  require(!corpus.empty(), Errc::empty_input, "corpus is empty");
  double total = 0.0;
  std::int64_t count = 0;
  for (const std::vector<TokenId>& seq : corpus) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      total -= policy.log_prob(std::span<const TokenId>(seq.data(), t), seq[t]);
      ++count;
    }
  }
  require(count > 0, Errc::empty_input, "corpus holds no next-token events");
  return total / static_cast<double>(count);
}

KGramPolicy fit_mle(const KGramPolicy& init, std::span<const std::vector<TokenId>> corpus,
                    int steps, double learning_rate) {
  require(!corpus.empty(), Errc::empty_input, "corpus is empty");
  for (const std::vector<TokenId>& seq : corpus) {
    require(!seq.empty() && seq.front() == init.vocab().bos, Errc::invalid_argument,
            "corpus sequences must begin with bos");
    for (TokenId t : seq) {
      require(t >= 0 && t < init.vocab().size, Errc::invalid_token,
              "corpus token out of range");
    }
  }

  KGramPolicy policy = init;
  for (int s = 0; s < steps; ++s) {
    SparseLogitGrad grad;
    grad.vocab_size = policy.vocab().size;
    std::int64_t count = 0;
    for (const std::vector<TokenId>& seq : corpus) {
      for (std::size_t t = 1; t < seq.size(); ++t) {
        const RowGrad g =
            policy.grad_log_prob(std::span<const TokenId>(seq.data(), t), seq[t]);
        grad.add_scaled(g.row, g.values, 1.0);
        ++count;
      }
    }
    if (count == 0) break;
    const double scale = learning_rate / static_cast<double>(count);
    std::vector<double>& logits = policy.logits();
    for (const auto& [row, values] : grad.rows) {
      double* dst = logits.data() + row * policy.vocab().size;
      for (std::size_t i = 0; i < values.size(); ++i) dst[i] += scale * values[i];
    }
  }
  return policy;
}

}  // namespace opd
