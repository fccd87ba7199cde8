#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "brnn/config.hpp"
#include "brnn/lstm.hpp"
#include "brnn/trainer.hpp"
#include "brnn/variational.hpp"

namespace brnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk layout, all integers little-endian:
//   "BRNN" | u32 version | u64 text length | resolved config text with
//   state.{seed,draws,epoch,step,lr} appended | tensor table | u64 FNV-1a
//   of every preceding byte.
// Tensor table entry: u64 name length, name bytes, u64 rank, u64 extent per
// axis, raw float32 values. Entries run until the trailing checksum. Names
// are "<param>.mu", "<param>.rho", optional "<param>.eta" and the carried
// recurrent state "carry.h"/"carry.c".
struct Checkpoint {
  RunConfig config;
  Posterior post;
  std::optional<ParamMap> eta;  // present when sharpening state was saved
  LstmState carry;              // undefined tensors when nothing was carried
  std::uint64_t rng_seed = 1;
  std::uint64_t rng_draws = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 1.0;
};

// Writes to <path>.tmp then renames, so a failed save never leaves a partial
// file at path. StorageError on any I/O failure.
void save_checkpoint(const Checkpoint& ck, const std::string& path);

// FormatError on bad magic, unsupported version, checksum mismatch,
// truncation, unknown or missing tensors, or extents that contradict the
// embedded config. StorageError when the file cannot be read.
Checkpoint load_checkpoint(const std::string& path);

// TrainState glue: capture everything a resumed run needs / rebuild the
// state with the random source replayed to the recorded draw.
Checkpoint checkpoint_of(const RunConfig& rc, const TrainState& st,
                         const ParamMap* eta = nullptr);
TrainState state_of(const Checkpoint& ck);

}  // namespace brnn
