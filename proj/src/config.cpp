#include "opd/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace opd {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::config_error, "cannot read config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

Config Config::from_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const std::size_t eq = t.find('=');
    require(eq != std::string::npos, Errc::config_error,
            "line " + std::to_string(line_no) + " is not 'key = value': " + t);
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    require(!key.empty(), Errc::config_error,
            "empty key on line " + std::to_string(line_no));
    require(!cfg.values_.count(key), Errc::config_error, "duplicate key: " + key);
    cfg.values_[key] = value;
  }
  return cfg;
}

bool Config::has(const std::string& key) const {
  touched_.insert(key);
  return values_.count(key) > 0;
}

std::string Config::raw(const std::string& key) const {
  touched_.insert(key);
  auto it = values_.find(key);
  require(it != values_.end(), Errc::config_error, "missing key: " + key);
  return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  touched_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::int64_t Config::get_i64(const std::string& key, std::int64_t fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  const std::string s = raw(key);
  try {
    std::size_t used = 0;
    const std::int64_t v = std::stoll(s, &used);
    require(used == s.size(), Errc::config_error, "not an integer: " + key + " = " + s);
    return v;
  } catch (const OpdError&) {
    throw;
  } catch (const std::exception&) {
    fail(Errc::config_error, "not an integer: " + key + " = " + s);
  }
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  const std::string s = raw(key);
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(s, &used);
    require(used == s.size(), Errc::config_error, "not an unsigned integer: " + key + " = " + s);
    return v;
  } catch (const OpdError&) {
    throw;
  } catch (const std::exception&) {
    fail(Errc::config_error, "not an unsigned integer: " + key + " = " + s);
  }
}

double Config::get_f64(const std::string& key, double fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  const std::string s = raw(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    require(used == s.size(), Errc::config_error, "not a number: " + key + " = " + s);
    return v;
  } catch (const OpdError&) {
    throw;
  } catch (const std::exception&) {
    fail(Errc::config_error, "not a number: " + key + " = " + s);
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  const std::string s = raw(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(Errc::config_error, "not a boolean: " + key + " = " + s);
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

std::vector<double> Config::get_f64_list(const std::string& key,
                                         const std::vector<double>& fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  std::vector<double> out;
  for (const std::string& item : split_list(raw(key))) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      fail(Errc::config_error, "not a number in list: " + key + " item '" + item + "'");
    }
  }
  require(!out.empty(), Errc::config_error, "empty list: " + key);
  return out;
}

std::vector<std::int64_t> Config::get_i64_list(
    const std::string& key, const std::vector<std::int64_t>& fallback) const {
  touched_.insert(key);
  if (!values_.count(key)) return fallback;
  std::vector<std::int64_t> out;
  for (const std::string& item : split_list(raw(key))) {
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      fail(Errc::config_error, "not an integer in list: " + key + " item '" + item + "'");
    }
  }
  require(!out.empty(), Errc::config_error, "empty list: " + key);
  return out;
}

void Config::reject_unknown_keys() const {
  std::string unknown;
  for (const auto& [key, value] : values_) {
    if (!touched_.count(key)) {
      if (!unknown.empty()) unknown += ", ";
      unknown += key;
    }
  }
  require(unknown.empty(), Errc::config_error, "unknown config keys: " + unknown);
}

}  // namespace opd
