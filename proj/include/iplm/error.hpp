#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace iplm {

// Every failure the library reports carries a short machine-readable code
// ("too_short_for_shingles", "examined_missing", ...) plus a human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  explicit Error(std::string code) : std::runtime_error(code), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Raised for malformed configuration; the CLI maps it to exit status 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace iplm
