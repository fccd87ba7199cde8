#include "brnn/lstm.hpp"

#include <utility>

namespace brnn {

std::vector<std::pair<std::string, Shape>> param_layout(const LstmDims& d) {
  const std::size_t in = d.embed + d.hidden;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embedding.table", Shape{d.vocab, d.embed});
  for (const char* gate : {"input", "forget", "cell", "output"}) {
    out.emplace_back("layer0." + std::string(gate) + ".w",
                     Shape{in, d.hidden});
    out.emplace_back("layer0." + std::string(gate) + ".b", Shape{d.hidden});
  }
  out.emplace_back("softmax.w", Shape{d.hidden, d.vocab});
  out.emplace_back("softmax.b", Shape{d.vocab});
  return out;
}

void check_params(const ParamMap& p, const LstmDims& d) {
  auto layout = param_layout(d);
  if (p.size() != layout.size()) {
    throw DimensionError("check_params: expected " +
                         std::to_string(layout.size()) + " parameters, got " +
                         std::to_string(p.size()));
  }
  for (const auto& [name, shape] : layout) {
    auto it = p.find(name);
    if (it == p.end()) {
      throw DimensionError("check_params: missing parameter " + name);
    }
    if (it->second.shape() != shape) {
      throw DimensionError("check_params: " + name + " has shape " +
                           shape_str(it->second.shape()) + ", expected " +
                           shape_str(shape));
    }
  }
}

LstmDims dims_of(const ParamMap& p) {
  const Tensor& emb = p.at("embedding.table");
  const Tensor& proj = p.at("softmax.w");
  LstmDims d{emb.shape()[0], emb.shape()[1], proj.shape()[0]};
  check_params(p, d);
  return d;
}

ParamMap init_params(const LstmDims& d, Rng& rng) {
  ParamMap p;
  for (const auto& [name, shape] : param_layout(d)) {
    Tensor t = Tensor::zeros(shape);
    const bool is_bias = shape.size() == 1;
    if (!is_bias) {
      rng.fill_uniform(t.values_mut(), -0.05, 0.05);
    } else if (name == "layer0.forget.b") {
      for (float& v : t.values_mut()) v = 1.0f;
    }
    p.emplace(name, std::move(t));
  }
  return p;
}

LstmState zero_state(std::size_t batch, std::size_t hidden) {
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

LstmState detach_state(const LstmState& s) {
  return {s.h.detach(), s.c.detach()};
}

LstmState lstm_step(Tape& tape, const ParamMap& p,
                    std::span<const std::int32_t> x_ids,
                    const LstmState& prev) {
  Tensor x = tape.gather_rows(p.at("embedding.table"), x_ids);
  Tensor xh = tape.concat_cols(x, prev.h);
  auto affine = [&](const std::string& gate) {
    return tape.add_rowvec(tape.matmul(xh, p.at("layer0." + gate + ".w")),
                           p.at("layer0." + gate + ".b"));
  };
  Tensor i = tape.sigmoid(affine("input"));
  Tensor f = tape.sigmoid(affine("forget"));
  Tensor g = tape.tanh_(affine("cell"));
  Tensor o = tape.sigmoid(affine("output"));
  Tensor c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
  Tensor h = tape.mul(o, tape.tanh_(c));
  return {h, c};
}

Tensor project(Tape& tape, const ParamMap& p, const Tensor& h) {
  return tape.add_rowvec(tape.matmul(h, p.at("softmax.w")), p.at("softmax.b"));
}

UnrollOut unroll(Tape& tape, const ParamMap& p,
                 std::span<const std::int32_t> inputs, std::size_t batch,
                 std::size_t steps, const LstmState& init) {
  if (batch == 0 || steps == 0) {
    throw DimensionError("unroll: batch and steps must be positive");
  }
  if (inputs.size() != batch * steps) {
    throw DimensionError("unroll: got " + std::to_string(inputs.size()) +
                         " input ids for batch " + std::to_string(batch) +
                         " x steps " + std::to_string(steps));
  }
  LstmDims d = dims_of(p);
  LstmState st = init.defined() ? init : zero_state(batch, d.hidden);
  if (st.h.shape() != Shape{batch, d.hidden}) {
    throw DimensionError("unroll: state shape " + shape_str(st.h.shape()) +
                         " does not match batch " + std::to_string(batch));
  }
  std::vector<Tensor> blocks;
  blocks.reserve(steps);
  std::vector<std::int32_t> ids(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t s = 0; s < batch; ++s) ids[s] = inputs[s * steps + t];
    st = lstm_step(tape, p, ids, st);
    blocks.push_back(project(tape, p, st.h));
  }
  Tensor logits =
      blocks.size() == 1 ? blocks[0] : tape.concat_rows(blocks);
  return {logits, st};
}

std::vector<std::int32_t> flatten_targets(std::span<const std::int32_t> y,
                                          std::size_t batch,
                                          std::size_t steps) {
  if (y.size() != batch * steps) {
    throw DimensionError("flatten_targets: got " + std::to_string(y.size()) +
                         " targets for batch " + std::to_string(batch) +
                         " x steps " + std::to_string(steps));
  }
  std::vector<std::int32_t> out(y.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t s = 0; s < batch; ++s) out[t * batch + s] = y[s * steps + t];
  }
  return out;
}

}  // namespace brnn
