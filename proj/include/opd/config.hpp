#pragma once

/**
 * Flat key/value run configuration.
 *
 * One `section.key = value` pair per line; '#' starts a comment line. Keys a
 * subcommand never looks up are treated as unknown and rejected (fail-fast),
 * so typos surface immediately instead of silently running with defaults.
 */

#include "opd/errors.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace opd {

class Config {
 public:
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_i64(const std::string& key, std::int64_t fallback) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  /// Comma-separated list of numbers.
  std::vector<double> get_f64_list(const std::string& key,
                                   const std::vector<double>& fallback) const;
  std::vector<std::int64_t> get_i64_list(const std::string& key,
                                         const std::vector<std::int64_t>& fallback) const;

  /// Throws config-error naming any key that was present but never read.
  void reject_unknown_keys() const;

 private:
  std::string raw(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> touched_;
};

}  // namespace opd
