#pragma once

/**
 * Positional loss analytics: per-bin means over generated-token positions and
 * head/tail concentration, plus step-to-step tail trends.
 *
 * Bins pool every token in the batch (no per-trajectory averaging); partial
 * bins merge associatively, so workers can aggregate independently.
 */

#include "opd/errors.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace opd {

struct PositionalBins {
  std::int64_t bin_width = 256;
  // bin index -> (loss sum, token count)
  std::map<std::int64_t, std::pair<double, std::int64_t>> bins;
  std::int64_t max_position = -1;

  void add(std::int64_t position, double loss);
  void merge(const PositionalBins& other);
  double mean(std::int64_t bin) const;
  double total_loss() const;
  std::vector<std::int64_t> nonempty() const;  // ascending bin indices
};

/// records carry (generated-token position, per-token loss).
PositionalBins bin_token_losses(
    std::span<const std::pair<std::int64_t, double>> records, std::int64_t bin_width);

/// Mean loss over the first `head_bins` nonempty bins divided by the mean
/// loss over the last `tail_bins` nonempty bins.
double concentration_stat(const PositionalBins& bins, int head_bins, int tail_bins);

struct TailTrend {
  struct Delta {
    std::int64_t step_from, step_to, bin;
    double delta;  // mean(step_to) - mean(step_from)
  };
  struct Summary {
    std::int64_t step_from, step_to;
    std::int64_t negative = 0, zero = 0, positive = 0;  // bins >= boundary
  };
  std::vector<Delta> deltas;
  std::vector<Summary> summaries;
};

/// Per-bin loss deltas between consecutive recorded steps (bins present in
/// both), with a sign summary restricted to bins at or beyond `boundary_bin`.
TailTrend profile_series(const std::map<std::int64_t, PositionalBins>& by_step,
                         std::int64_t boundary_bin);

}  // namespace opd
