#pragma once

#include <stdexcept>
#include <string>

namespace lrsa {

// Mismatched extents, bad axis, odd head dim, and similar shape violations.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A softmax slice whose entries are all -inf: the caller produced a fully
// masked query, which the mask builders must never do.
struct DegenerateRowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Row selection with out-of-range or non-ascending indices.
struct IndexError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Cache append whose positions do not continue the token stream.
struct PositionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Attn-Fill ordering violated: a retention set is needed before it exists.
struct SequencingError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid run configuration. The message lists every violation found.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Autograd misuse: non-scalar loss, repeated backward without a new graph,
// or a cycle (impossible by construction, asserted anyway).
struct AutogradError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace lrsa
