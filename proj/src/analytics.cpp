#include "opd/analytics.hpp"

#include <algorithm>
#include <span>

namespace opd {

void PositionalBins::add(std::int64_t position, double loss) {
  require(position >= 0, Errc::invalid_argument, "token position must be >= 0");
  auto& [sum, count] = bins[position / bin_width];
  sum += loss;
  count += 1;
  max_position = std::max(max_position, position);
}

void PositionalBins::merge(const PositionalBins& other) {
  require(bin_width == other.bin_width, Errc::invalid_argument,
          "cannot merge bins of different widths");
  for (const auto& [idx, sc] : other.bins) {
    auto& [sum, count] = bins[idx];
    sum += sc.first;
    count += sc.second;
  }
  max_position = std::max(max_position, other.max_position);
}

double PositionalBins::mean(std::int64_t bin) const {
  auto it = bins.find(bin);
  require(it != bins.end() && it->second.second > 0, Errc::empty_input,
          "bin " + std::to_string(bin) + " is empty");
  return it->second.first / static_cast<double>(it->second.second);
}

double PositionalBins::total_loss() const {
  double t = 0.0;
  for (const auto& [idx, sc] : bins) t += sc.first;
  return t;
}

std::vector<std::int64_t> PositionalBins::nonempty() const {
  std::vector<std::int64_t> out;
  for (const auto& [idx, sc] : bins) {
    if (sc.second > 0) out.push_back(idx);
  }
  return out;  // std::map keeps them ascending
}

PositionalBins bin_token_losses(
    std::span<const std::pair<std::int64_t, double>> records, std::int64_t bin_width) {
  require(bin_width > 0, Errc::invalid_argument, "bin width must be positive");
  PositionalBins out;
  out.bin_width = bin_width;
  for (const auto& [position, loss] : records) out.add(position, loss);
  return out;
}

double concentration_stat(const PositionalBins& bins, int head_bins, int tail_bins) {
  require(head_bins >= 1 && tail_bins >= 1, Errc::invalid_argument,
          "head and tail widths must be >= 1");
  const std::vector<std::int64_t> idx = bins.nonempty();
  require(!idx.empty(), Errc::empty_input, "no nonempty bins");

  const std::size_t head_n = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(head_bins));
  const std::size_t tail_n = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(tail_bins));

  double head = 0.0;
  for (std::size_t i = 0; i < head_n; ++i) head += bins.mean(idx[i]);
  head /= static_cast<double>(head_n);

  double tail = 0.0;
  for (std::size_t i = 0; i < tail_n; ++i) tail += bins.mean(idx[idx.size() - 1 - i]);
  tail /= static_cast<double>(tail_n);

  return head / tail;
}

TailTrend profile_series(const std::map<std::int64_t, PositionalBins>& by_step,
                         std::int64_t boundary_bin) {
  TailTrend trend;
  if (by_step.size() < 2) return trend;

  auto it = by_step.begin();
  auto prev = it++;
  for (; it != by_step.end(); prev = it++) {
    TailTrend::Summary summary;
    summary.step_from = prev->first;
    summary.step_to = it->first;
    for (const auto& [bin, sc] : prev->second.bins) {
      if (sc.second <= 0) continue;
      auto cur = it->second.bins.find(bin);
      if (cur == it->second.bins.end() || cur->second.second <= 0) continue;
      const double delta = it->second.mean(bin) - prev->second.mean(bin);
      trend.deltas.push_back({prev->first, it->first, bin, delta});
      if (bin >= boundary_bin) {
        if (delta < 0.0) ++summary.negative;
        else if (delta > 0.0) ++summary.positive;
        else ++summary.zero;
      }
    }
    trend.summaries.push_back(summary);
  }
  return trend;
}

}  // namespace opd
