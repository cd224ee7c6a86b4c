#pragma once

/**
 * Deterministic random streams.
 *
 * Rng wraps std::mt19937_64 (the engine algorithm is pinned by the standard,
 * unlike the <random> distributions) and converts raw 64-bit draws to doubles
 * itself, so identical seeds give bit-identical draws on every platform.
 *
 * derive_seed() builds independent per-(prompt, sample, step, ...) streams by
 * chaining SplitMix64 over the base seed and the stream labels. Workers each
 * own one derived stream; results never depend on scheduling.
 */

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace opd {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(base ^ 0xA02D'5EED'0000'0001ULL);
  for (std::uint64_t p : parts) {
    h = splitmix64(h ^ splitmix64(p));
  }
  return h;
}

// Stream labels. Keeping them centralized avoids accidental stream reuse.
namespace stream {
constexpr std::uint64_t rollout = 0x524F4C4CULL;      // batch rollouts
constexpr std::uint64_t batch_select = 0x42415443ULL; // prompt subsampling
constexpr std::uint64_t lambda_mix = 0x4C414D42ULL;   // on/off-policy mixing
constexpr std::uint64_t eval = 0x4556414CULL;         // dev evaluation
constexpr std::uint64_t acc_at_k = 0x4143434BULL;     // accuracy sampling
constexpr std::uint64_t diagnostics = 0x44494147ULL;  // positional-bin batches
constexpr std::uint64_t probe = 0x50524F42ULL;        // teacher-prefix rollouts
constexpr std::uint64_t dataset = 0x44415441ULL;      // question splits
constexpr std::uint64_t corpus = 0x434F5250ULL;       // off-policy corpus
constexpr std::uint64_t init = 0x494E4954ULL;         // parameter init
}  // namespace stream

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller; deterministic (never uses std:: distributions).
  double next_gaussian() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace opd
