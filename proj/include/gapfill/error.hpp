#pragma once

#include <stdexcept>
#include <string>

namespace gapfill {

/// A caller broke an operation's documented precondition.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data is malformed: bad magic, truncated payload, wrong schema.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Network or endpoint failure that survived the retry budget.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or command line; maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage ran before the stage that produces its inputs.
class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(const std::string& what, std::string producer)
      : std::runtime_error(what), producer_(std::move(producer)) {}
  const std::string& producer() const noexcept { return producer_; }

 private:
  std::string producer_;
};

}  // namespace gapfill
