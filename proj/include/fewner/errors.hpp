#pragma once

#include <stdexcept>
#include <string>

namespace fewner {

/// Malformed input data (corpus files, episode JSON).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration (unknown format, invalid key, odd rotary width, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// The corpus cannot support the requested episode shape.
struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input exceeds the encoder's maximum sequence length.
struct TruncationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable, truncated, or version-mismatched checkpoint.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fewner
