#include "brnn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "brnn/data.hpp"

namespace brnn {

const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Map:
      return "map";
    case EvalMode::MonteCarlo:
      return "mc";
    case EvalMode::Sharpened:
      return "sharpened";
  }
  return "eval";
}

namespace {

void check_stream(std::span<const std::int32_t> ids, std::size_t steps) {
  if (ids.size() < 2) {
    throw DataError("evaluation: need at least two tokens to score");
  }
  if (steps == 0) {
    throw ContractError("evaluation: window length must be >= 1");
  }
}

// Appends log p(ids[t+1] | ids[..t]) in double for every transition,
// windowed with carried state. Windowing never changes the numbers: state
// values are bit-identical to one long unroll.
void score_stream(const ParamMap& params, std::span<const std::int32_t> ids,
                  std::size_t steps, std::vector<double>& logp) {
  const LstmDims d = dims_of(params);
  const std::size_t n = ids.size() - 1;
  LstmState state = zero_state(1, d.hidden);
  for (std::size_t pos = 0; pos < n;) {
    const std::size_t len = std::min(steps, n - pos);
    Tape tape(false);
    UnrollOut out = unroll(tape, params, ids.subspan(pos, len), 1, len, state);
    auto lv = out.logits.values();
    const std::size_t v = d.vocab;
    for (std::size_t t = 0; t < len; ++t) {
      const std::int32_t y = ids[pos + t + 1];
      if (y < 0 || static_cast<std::size_t>(y) >= v) {
        throw IndexError("evaluation: target id out of range");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v; ++j) {
        mx = std::max(mx, static_cast<double>(lv[t * v + j]));
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        denom += std::exp(static_cast<double>(lv[t * v + j]) - mx);
      }
      logp.push_back(static_cast<double>(lv[t * v + y]) - mx -
                     std::log(denom));
    }
    state = detach_state(out.state);
    pos += len;
  }
}

// Adds the double-precision predictive distribution for every position of
// `inputs` into acc (position-major, acc[pos * v + w]). Each row sums to 1,
// so acc / passes stays a distribution.
void accumulate_predictive(const ParamMap& params,
                           std::span<const std::int32_t> inputs,
                           std::size_t steps, std::vector<double>& acc) {
  const LstmDims d = dims_of(params);
  const std::size_t v = d.vocab;
  LstmState state = zero_state(1, d.hidden);
  for (std::size_t pos = 0; pos < inputs.size();) {
    const std::size_t len = std::min(steps, inputs.size() - pos);
    Tape tape(false);
    UnrollOut out =
        unroll(tape, params, inputs.subspan(pos, len), 1, len, state);
    auto lv = out.logits.values();
    for (std::size_t t = 0; t < len; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v; ++j) {
        mx = std::max(mx, static_cast<double>(lv[t * v + j]));
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        denom += std::exp(static_cast<double>(lv[t * v + j]) - mx);
      }
      for (std::size_t j = 0; j < v; ++j) {
        acc[(pos + t) * v + j] +=
            std::exp(static_cast<double>(lv[t * v + j]) - mx) / denom;
      }
    }
    state = detach_state(out.state);
    pos += len;
  }
}

// Entropy positions condition on prefixes 0..T-1: the fixed start input
// (token 0) stands in for the empty prefix, then ids[0..T-2] follow.
std::vector<std::int32_t> entropy_inputs(std::span<const std::int32_t> ids) {
  std::vector<std::int32_t> in;
  in.reserve(ids.size());
  in.push_back(0);
  in.insert(in.end(), ids.begin(), ids.end() - 1);
  return in;
}

double entropy_of_distribution(std::span<const double> p) {
  double h = 0.0;
  for (double q : p) {
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

constexpr std::size_t kEntropyWindow = 64;

}  // namespace

EvalReport eval_map(const Posterior& post, std::span<const std::int32_t> ids,
                    std::size_t steps) {
  check_stream(ids, steps);
  std::vector<double> logp;
  score_stream(mean_params(post), ids, steps, logp);
  EvalReport r;
  r.mode = EvalMode::Map;
  r.tokens = logp.size();
  double total = 0.0;
  for (double lp : logp) total -= lp;
  r.nll = total / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.nll);
  return r;
}

EvalReport eval_mc(const Posterior& post, std::span<const std::int32_t> ids,
                   std::size_t steps, std::size_t samples, Rng& rng) {
  check_stream(ids, steps);
  if (samples == 0) {
    throw ContractError("eval_mc: samples must be >= 1");
  }
  const std::size_t n = ids.size() - 1;
  std::vector<std::vector<double>> lp(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    lp[s].reserve(n);
    score_stream(sample_leaves(post, rng).theta, ids, steps, lp[s]);
  }

  // Per-token log of the probability averaged over samples, max-shifted.
  // ratios[s][t] = exp(lp[s][t] - m[t]) also drives the jackknife below.
  std::vector<double> m(n, -std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t t = 0; t < n; ++t) m[t] = std::max(m[t], lp[s][t]);
  }
  std::vector<double> ratio_sum(n, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t t = 0; t < n; ++t) {
      lp[s][t] = std::exp(lp[s][t] - m[t]);
      ratio_sum[t] += lp[s][t];
    }
  }
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    total -= m[t] + std::log(ratio_sum[t] / static_cast<double>(samples));
  }

  EvalReport r;
  r.mode = EvalMode::MonteCarlo;
  r.samples = samples;
  r.tokens = n;
  r.nll = total / static_cast<double>(n);
  r.perplexity = std::exp(r.nll);
  if (samples > 1) {
    std::vector<double> loo(samples, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        acc -= m[t] + std::log((ratio_sum[t] - lp[s][t]) /
                               static_cast<double>(samples - 1));
      }
      loo[s] = acc / static_cast<double>(n);
    }
    double mean = 0.0;
    for (double v : loo) mean += v;
    mean /= static_cast<double>(samples);
    double ss = 0.0;
    for (double v : loo) ss += (v - mean) * (v - mean);
    r.se = std::sqrt(ss * static_cast<double>(samples - 1) /
                     static_cast<double>(samples));
  }
  return r;
}

EvalReport eval_sharpened(const Posterior& post, const ParamMap& eta,
                          const SharpeningConfig& scfg,
                          std::span<const std::int32_t> ids, std::size_t steps,
                          std::size_t samples, Rng& rng) {
  check_stream(ids, steps);
  // Hand-built plan: same windows as the other modes, including the short
  // tail, so all three modes score the identical token set.
  CutPlan plan;
  plan.batch = 1;
  const std::size_t n = ids.size() - 1;
  for (std::size_t pos = 0; pos < n;) {
    const std::size_t len = std::min(steps, n - pos);
    CutBatch cut;
    cut.x.assign(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                 ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    cut.y.assign(ids.begin() + static_cast<std::ptrdiff_t>(pos + 1),
                 ids.begin() + static_cast<std::ptrdiff_t>(pos + len + 1));
    cut.batch = 1;
    cut.steps = len;
    cut.c = plan.cuts.size();
    cut.carried = pos > 0;
    plan.cuts.push_back(std::move(cut));
    pos += len;
  }
  plan.b_count = 1;
  plan.c_count = plan.cuts.size();
  plan.steps = steps;

  BoundEstimate est = eval_bound(post, eta, scfg, plan, samples, rng);
  EvalReport r;
  r.mode = EvalMode::Sharpened;
  r.samples = samples;
  r.tokens = est.tokens;
  r.nll = -est.per_token;
  r.perplexity = std::exp(r.nll);
  r.upper_bound = true;
  if (samples > 1) {
    double ss = 0.0;
    for (double v : est.per_sample) {
      ss += (v + r.nll) * (v + r.nll);  // v - mean, mean = -r.nll
    }
    r.se = std::sqrt(ss / static_cast<double>(samples - 1) /
                     static_cast<double>(samples));
  }
  return r;
}

double sequence_entropy(const ParamMap& params,
                        std::span<const std::int32_t> x) {
  if (x.empty()) {
    throw ContractError("sequence_entropy: sequence must be nonempty");
  }
  const LstmDims d = dims_of(params);
  std::vector<std::int32_t> inputs = entropy_inputs(x);
  std::vector<double> acc(inputs.size() * d.vocab, 0.0);
  accumulate_predictive(params, inputs, kEntropyWindow, acc);
  double total = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    total += entropy_of_distribution(
        std::span<const double>(acc).subspan(t * d.vocab, d.vocab));
  }
  return total;
}

EntropyGapReport entropy_gap(const Posterior& post,
                             std::span<const std::int32_t> ids,
                             std::size_t samples, Rng& rng) {
  if (ids.size() < 2) {
    throw DataError("entropy_gap: need at least two tokens");
  }
  const std::size_t v = post.dims.vocab;
  const std::size_t T = ids.size();
  std::vector<std::int32_t> rev = reverse_corpus(ids);
  std::vector<std::int32_t> in_fwd = entropy_inputs(ids);
  std::vector<std::int32_t> in_rev = entropy_inputs(rev);

  std::vector<double> acc_fwd(T * v, 0.0), acc_rev(T * v, 0.0);
  const std::size_t passes = samples == 0 ? 1 : samples;
  for (std::size_t s = 0; s < passes; ++s) {
    // One draw serves both directions, so reversed-corpus evaluation with an
    // equally-seeded rng reproduces the same numbers with the roles swapped.
    ParamMap theta =
        samples == 0 ? mean_params(post) : sample_leaves(post, rng).theta;
    accumulate_predictive(theta, in_fwd, kEntropyWindow, acc_fwd);
    accumulate_predictive(theta, in_rev, kEntropyWindow, acc_rev);
  }

  auto per_word = [&](std::vector<double>& acc) {
    double total = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < v; ++j) {
        acc[t * v + j] /= static_cast<double>(passes);
      }
      total += entropy_of_distribution(
          std::span<const double>(acc).subspan(t * v, v));
    }
    return total / static_cast<double>(T);
  };

  EntropyGapReport r;
  r.h_forward = per_word(acc_fwd);
  r.h_reversed = per_word(acc_rev);
  r.gap = r.h_reversed - r.h_forward;
  r.samples = samples;
  r.tokens = T;
  return r;
}

double unigram_entropy(std::span<const std::int32_t> ids) {
  if (ids.empty()) {
    throw DataError("unigram_entropy: empty corpus");
  }
  std::map<std::int32_t, std::size_t> counts;
  for (std::int32_t id : ids) ++counts[id];
  const double n = static_cast<double>(ids.size());
  double acc = 0.0;
  for (const auto& [id, c] : counts) {
    acc += static_cast<double>(c) * std::log(static_cast<double>(c));
  }
  return std::log(n) - acc / n;
}

}  // namespace brnn
