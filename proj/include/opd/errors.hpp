#pragma once

/**
 * Error taxonomy shared by all modules.
 *
 * Every failure surfaces as an OpdError carrying a machine-checkable code.
 * The CLI maps ConfigError / usage problems to exit status 2 and everything
 * else to exit status 1.
 */

#include <stdexcept>
#include <string>

namespace opd {

enum class Errc {
  invalid_token,
  invalid_argument,
  invalid_cap,
  invalid_mask,
  invalid_data,
  empty_input,
  unsupported_policy,
  incompatible_policies,
  budget_exceeded,
  exhausted_space,
  io_error,
  config_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_token: return "invalid-token";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::invalid_cap: return "invalid-cap";
    case Errc::invalid_mask: return "invalid-mask";
    case Errc::invalid_data: return "invalid-data";
    case Errc::empty_input: return "empty-input";
    case Errc::unsupported_policy: return "unsupported-policy";
    case Errc::incompatible_policies: return "incompatible-policies";
    case Errc::budget_exceeded: return "budget-exceeded";
    case Errc::exhausted_space: return "exhausted-space";
    case Errc::io_error: return "io-error";
    case Errc::config_error: return "config-error";
  }
  return "unknown";
}

class OpdError : public std::runtime_error {
 public:
  OpdError(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw OpdError(code, message);
}

inline void require(bool ok, Errc code, const std::string& message) {
  if (!ok) fail(code, message);
}

}  // namespace opd
