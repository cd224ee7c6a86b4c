#pragma once

/**
 * Config-driven experiment harness behind the CLI.
 *
 * Subcommands: train-opd, train-seqkd, probe, ablate-window, bins-report,
 * cost-report, oracle-check, sweep-lr. Each loads the flat config, rejects
 * unknown keys, runs, and writes tab-separated result tables under the output
 * directory. Identical config + seed reproduces every result table byte for
 * byte; wall-clock timings go to a separate timings file.
 */

#include "opd/config.hpp"
#include "opd/objective.hpp"
#include "opd/optimize.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace opd {

struct ExperimentOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;  // overrides the config's seed key
  int workers = 1;
};

/// Returns a process exit status: 0 on success, 1 when oracle-check gates
/// fail. Configuration problems throw OpdError(config_error).
int run_experiment(const std::string& subcommand, const ExperimentOptions& options);

// ============================================================================
// Estimator/oracle gates (shared by the oracle-check subcommand and the
// acceptance suite).
// ============================================================================

struct OracleGateResult {
  int instance = 0;
  std::int32_t vocab_size = 0;
  int order = 0;
  std::int64_t cap = 0;
  std::string mask;
  double exact_kl = 0.0;
  double mc_kl = 0.0;
  double rel_error = 0.0;  // |mc - exact| / max(|exact|, 0.05)
  double cosine = 0.0;     // MC surrogate vs finite-difference oracle gradient
  bool kl_pass = false;    // rel_error < 0.02
  bool grad_pass = false;  // cosine > 0.99
};

/// Randomized tiny instances (V in {4,5}, order in {1,2}, cap in {2..4}) with
/// Gaussian logits of the given scale.
std::vector<OracleGateResult> run_oracle_gates(int instance_count,
                                               std::int64_t kl_trajectories,
                                               std::int64_t grad_trajectories,
                                               std::uint64_t seed, double logit_stddev);

}  // namespace opd
