#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "brnn/rng.hpp"
#include "brnn/tensor.hpp"

namespace brnn {

// Parameters are addressed by name everywhere (training, checkpoints,
// pruning reports), so an ordered map keeps iteration deterministic.
using ParamMap = std::map<std::string, Tensor>;

struct LstmDims {
  std::size_t vocab = 0;
  std::size_t embed = 0;
  std::size_t hidden = 0;
};

// Canonical parameter list: embedding table, the four gate blocks (each
// taking the concatenated [x, h] so weights are [embed+hidden, hidden]),
// and the output projection. Order is fixed and load-bearing for init.
std::vector<std::pair<std::string, Shape>> param_layout(const LstmDims& d);

// Throws DimensionError unless p holds exactly the canonical set of
// parameters with the right shapes.
void check_params(const ParamMap& p, const LstmDims& d);

// Dims recovered from a parameter map (shapes of embedding + projection).
LstmDims dims_of(const ParamMap& p);

// Fresh deterministic parameters: weights U(-0.05, 0.05) drawn in layout
// order, biases zero except the forget gate bias, which starts at 1.0 so
// memory is initially retained.
ParamMap init_params(const LstmDims& d, Rng& rng);

struct LstmState {
  Tensor h;  // [batch, hidden]
  Tensor c;  // [batch, hidden]
  bool defined() const { return h.defined() && c.defined(); }
};

LstmState zero_state(std::size_t batch, std::size_t hidden);

// Deep-copied state with no gradient link; used to carry memory across
// truncation boundaries without backpropagating through them.
LstmState detach_state(const LstmState& s);

// One recurrence step over a batch of token ids. Gates use sigmoid, the
// candidate cell uses tanh; no peephole connections.
LstmState lstm_step(Tape& tape, const ParamMap& p,
                    std::span<const std::int32_t> x_ids,
                    const LstmState& prev);

// Output projection of a hidden state: h W + b, one row of logits per
// stream.
Tensor project(Tape& tape, const ParamMap& p, const Tensor& h);

struct UnrollOut {
  Tensor logits;    // [steps*batch, vocab]; row t*batch + s = stream s, step t
  LstmState state;  // state after the last step
};

// Runs `steps` positions for `batch` parallel streams. Inputs are stored
// stream-major, inputs[s*steps + t]; logits come out step-major so targets
// flattened with flatten_targets line up row for row. An undefined init
// state means zeros.
UnrollOut unroll(Tape& tape, const ParamMap& p,
                 std::span<const std::int32_t> inputs, std::size_t batch,
                 std::size_t steps, const LstmState& init);

// Stream-major targets rearranged to match unroll's logit row order.
std::vector<std::int32_t> flatten_targets(std::span<const std::int32_t> y,
                                          std::size_t batch,
                                          std::size_t steps);

}  // namespace brnn
