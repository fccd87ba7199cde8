#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "brnn/evaluation.hpp"
#include "brnn/variational.hpp"

namespace brnn {

// One coordinate of the flattened parameter set: tensor name plus flat
// offset. The global order is posterior map order, offsets within a tensor.
struct ParamCoord {
  std::string name;
  std::size_t offset = 0;
};

// Keep/drop flags per parameter tensor (1 = dropped), plus bookkeeping.
struct PruneMask {
  std::map<std::string, std::vector<std::uint8_t>> drop;
  std::size_t dropped = 0;
  std::size_t total = 0;
  double fraction = 0.0;   // requested
  double threshold = 0.0;  // largest |mu|/sigma among dropped coords; 0 if none
};

// Every coordinate ordered by ascending |mu|/sigma — the removal order. Ties
// keep their global position (stable). Coordinates whose width underflowed to
// zero count as infinite ratio and land last.
std::vector<ParamCoord> snr_order(const Posterior& post);

// Zeroes the floor(f * total) lowest-ratio coordinates of a deep copy: mu = 0
// and rho = -1e4, whose softplus underflows to exactly 0, so draws at dropped
// coordinates are 0 bit for bit. The input is untouched. f must be in [0, 1].
std::pair<Posterior, PruneMask> prune(const Posterior& post, double f);

// Applies an existing mask to a deep copy. prune(post, f) equals
// apply_mask(post, its mask), and applying twice equals applying once.
Posterior apply_mask(const Posterior& post, const PruneMask& mask);

// Dropped entries per matrix row; a vector parameter is one row.
std::map<std::string, std::vector<std::size_t>> row_drop_counts(
    const PruneMask& mask, const Posterior& post);

struct SweepRow {
  double fraction = 0.0;
  std::size_t dropped = 0;
  EvalReport report;  // posterior-mean evaluation of the pruned model
  PruneMask mask;
};

// Posterior-mean perplexity of the pruned model at each fraction, which the
// caller passes sorted ascending.
std::vector<SweepRow> prune_sweep(const Posterior& post,
                                  std::span<const std::int32_t> ids,
                                  std::span<const double> fractions,
                                  std::size_t steps);

// One comma-separated 0/1 grid per parameter tensor at <dir>/<name>.csv with
// '.' in names turned into '_'; vectors come out as a single row.
void save_mask_grids(const PruneMask& mask, const Posterior& post,
                     const std::string& dir);

}  // namespace brnn
