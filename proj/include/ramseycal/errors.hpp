#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ramseycal {

// Input outside an operation's mathematical domain (zero detuning, eps >= 15/14, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A fit could not be attempted (precondition) or an integrator/solver gave up.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated file, bad magic, checksum mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration validation failure. Carries every violation, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration";
    for (const auto& s : v) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

}  // namespace ramseycal
