#include "opd/analytics.hpp"

#include "opd/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace opd;

TEST_CASE("single token lands in bin zero") {
  const std::vector<std::pair<std::int64_t, double>> records{{0, 0.5}};
  const PositionalBins bins = bin_token_losses(records, 256);
  CHECK(bins.mean(0) == 0.5);
  CHECK(bins.nonempty() == std::vector<std::int64_t>{0});
}

TEST_CASE("positions 255 and 256 fall into adjacent bins") {
  const std::vector<std::pair<std::int64_t, double>> records{{255, 1.0}, {256, 2.0}};
  const PositionalBins bins = bin_token_losses(records, 256);
  CHECK(bins.mean(0) == 1.0);
  CHECK(bins.mean(1) == 2.0);
}

TEST_CASE("uniform loss gives every nonempty bin the same mean") {
  std::vector<std::pair<std::int64_t, double>> records;
  for (int p = 0; p < 1000; ++p) records.push_back({p, 0.37});
  const PositionalBins bins = bin_token_losses(records, 64);
  for (const std::int64_t b : bins.nonempty()) {
    CHECK(bins.mean(b) == doctest::Approx(0.37).epsilon(1e-12));
  }
}

TEST_CASE("bin width must be positive; positions must be non-negative") {
  const std::vector<std::pair<std::int64_t, double>> records{{0, 1.0}};
  CHECK_THROWS_AS(bin_token_losses(records, 0), OpdError);
  const std::vector<std::pair<std::int64_t, double>> bad{{-1, 1.0}};
  CHECK_THROWS_AS(bin_token_losses(bad, 16), OpdError);
}

TEST_CASE("reconstruction: sum of mean*count equals the total loss") {
  Rng rng(9);
  std::vector<std::pair<std::int64_t, double>> records;
  double total = 0.0;
  for (int i = 0; i < 5000; ++i) {
    const std::int64_t pos = static_cast<std::int64_t>(rng.next_u64() % 4096);
    const double loss = 3.0 * rng.next_unit() - 1.0;
    records.push_back({pos, loss});
    total += loss;
  }
  const PositionalBins bins = bin_token_losses(records, 256);
  double reconstructed = 0.0;
  for (const std::int64_t b : bins.nonempty()) {
    reconstructed += bins.mean(b) * static_cast<double>(bins.bins.at(b).second);
  }
  CHECK(std::abs(reconstructed - total) < 1e-9);
}

TEST_CASE("bin assignment is exhaustive and disjoint") {
  std::vector<std::pair<std::int64_t, double>> records;
  for (int p = 0; p <= 1000; ++p) records.push_back({p, 1.0});
  const PositionalBins bins = bin_token_losses(records, 128);
  std::int64_t count = 0;
  for (const auto& [idx, sc] : bins.bins) count += sc.second;
  CHECK(count == 1001);
  CHECK(bins.max_position == 1000);
}

TEST_CASE("partial bins merge associatively") {
  std::vector<std::pair<std::int64_t, double>> a{{0, 1.0}, {300, 2.0}};
  std::vector<std::pair<std::int64_t, double>> b{{1, 3.0}, {700, 4.0}};
  PositionalBins left = bin_token_losses(a, 256);
  left.merge(bin_token_losses(b, 256));
  std::vector<std::pair<std::int64_t, double>> both{{0, 1.0}, {300, 2.0}, {1, 3.0}, {700, 4.0}};
  const PositionalBins direct = bin_token_losses(both, 256);
  CHECK(left.bins == direct.bins);
  CHECK(left.max_position == direct.max_position);
}

TEST_CASE("concentration statistic is a ratio of head and tail means") {
  std::vector<std::pair<std::int64_t, double>> records;
  for (int i = 0; i < 10; ++i) records.push_back({i, 0.4});         // bin 0
  for (int i = 0; i < 10; ++i) records.push_back({900 + i, 0.1});   // tail bin
  const PositionalBins bins = bin_token_losses(records, 256);
  CHECK(concentration_stat(bins, 1, 1) == doctest::Approx(4.0).epsilon(1e-12));

  std::vector<std::pair<std::int64_t, double>> flat;
  for (int i = 0; i < 2000; ++i) flat.push_back({i, 0.2});
  const PositionalBins fbins = bin_token_losses(flat, 256);
  CHECK(concentration_stat(fbins, 1, 1) == doctest::Approx(1.0).epsilon(1e-12));

  const PositionalBins empty;
  CHECK_THROWS_AS(concentration_stat(empty, 1, 1), OpdError);
}

TEST_CASE("profile_series: identical profiles give all-zero deltas") {
  std::vector<std::pair<std::int64_t, double>> records;
  for (int i = 0; i < 600; ++i) records.push_back({i, 0.3});
  std::map<std::int64_t, PositionalBins> series;
  series[10] = bin_token_losses(records, 128);
  series[20] = bin_token_losses(records, 128);
  const TailTrend trend = profile_series(series, 0);
  REQUIRE(!trend.deltas.empty());
  for (const auto& d : trend.deltas) CHECK(d.delta == 0.0);
  REQUIRE(trend.summaries.size() == 1);
  CHECK(trend.summaries[0].negative == 0);
  CHECK(trend.summaries[0].positive == 0);
}

TEST_CASE("profile_series: strictly decreasing losses give all-negative deltas") {
  auto profile = [](double level) {
    std::vector<std::pair<std::int64_t, double>> records;
    for (int i = 0; i < 600; ++i) records.push_back({i, level});
    return bin_token_losses(records, 128);
  };
  std::map<std::int64_t, PositionalBins> series;
  series[10] = profile(0.9);
  series[20] = profile(0.5);
  series[30] = profile(0.2);
  const TailTrend trend = profile_series(series, 2);
  REQUIRE(trend.summaries.size() == 2);
  for (const auto& s : trend.summaries) {
    CHECK(s.negative > 0);
    CHECK(s.positive == 0);
    CHECK(s.zero == 0);
  }
  for (const auto& d : trend.deltas) CHECK(d.delta < 0.0);
  // boundary restricts the summary counts to bins >= 2
  CHECK(trend.summaries[0].negative == 3);  // bins 2, 3, 4 of 0..4
}

TEST_CASE("profile_series with fewer than two steps reports nothing") {
  std::map<std::int64_t, PositionalBins> series;
  const TailTrend empty = profile_series(series, 0);
  CHECK(empty.deltas.empty());
  CHECK(empty.summaries.empty());
}
