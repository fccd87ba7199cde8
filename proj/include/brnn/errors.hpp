#pragma once

#include <stdexcept>
#include <string>

namespace brnn {

// Error taxonomy. Every failure surfaces as one of these so callers can map
// outcomes to exit codes without string matching.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes disagree with an operation's contract.
struct DimensionError : Error {
  using Error::Error;
};

// NaN/Inf produced, or a domain violation (log of non-positive input).
struct NumericError : Error {
  using Error::Error;
};

// Integer index (target id, token id) out of range.
struct IndexError : Error {
  using Error::Error;
};

// API precondition violated (e.g. backward on a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

// Corpus/batching problems: empty text, stream too short, bad iteration order.
struct DataError : Error {
  using Error::Error;
};

// Token outside the vocabulary and no UNK symbol available.
struct VocabError : Error {
  using Error::Error;
};

// Checkpoint parse failures: bad magic, version, checksum, shapes.
struct FormatError : Error {
  using Error::Error;
};

// Filesystem-level failures while persisting state.
struct StorageError : Error {
  using Error::Error;
};

// Run-configuration problems: unknown key, unparsable value.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace brnn
