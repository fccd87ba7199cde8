#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "brnn/sharpening.hpp"
#include "brnn/variational.hpp"

namespace brnn {

enum class EvalMode { Map, MonteCarlo, Sharpened };

const char* eval_mode_name(EvalMode m);

// One perplexity measurement. nll is nats per scored token and perplexity =
// exp(nll), always. se is the jackknife standard error of nll across the S
// posterior samples (zero in map mode, which has no sampling). A sharpened
// report carries upper_bound = true: its perplexity bounds the true value
// from above rather than estimating it.
struct EvalReport {
  EvalMode mode = EvalMode::Map;
  double nll = 0.0;
  double perplexity = 1.0;
  std::size_t tokens = 0;
  std::size_t samples = 1;
  double se = 0.0;
  bool upper_bound = false;
};

// All evaluations stream the corpus in order: inputs ids[0..N-2] score
// targets ids[1..N-1] in windows of `steps` positions with recurrent state
// carried across windows, so every next-token transition is scored exactly
// once regardless of the window length.

// theta = mu, one pass.
EvalReport eval_map(const Posterior& post, std::span<const std::int32_t> ids,
                    std::size_t steps);

// S full-parameter posterior draws, one pass each; per-token predictive
// probabilities are averaged across draws before the log (model averaging,
// the Bayesian predictive), never the log-probabilities themselves.
EvalReport eval_mc(const Posterior& post, std::span<const std::int32_t> ids,
                   std::size_t steps, std::size_t samples, Rng& rng);

// Lower bound on the posterior-sharpened predictive log-probability,
// reported as an upper bound on perplexity.
EvalReport eval_sharpened(const Posterior& post, const ParamMap& eta,
                          const SharpeningConfig& scfg,
                          std::span<const std::int32_t> ids, std::size_t steps,
                          std::size_t samples, Rng& rng);

// Full predictive-distribution entropy of a token sequence in nats:
// sum over positions i = 1..T of H[p(. | x_{1:i-1})], the entropy of the
// model's own next-token distribution, not cross-entropy against targets.
// Position 1 conditions on the empty prefix: zero recurrent state driven by
// the fixed start input (token 0), a constant carrying no corpus
// information. Probabilities come from the logits in double precision.
double sequence_entropy(const ParamMap& params,
                        std::span<const std::int32_t> x);

// Per-word forward/reversed entropies and their difference. A model whose
// predictions use word order spends entropy differently on the reversed
// stream; gap == h_reversed - h_forward exactly.
struct EntropyGapReport {
  double h_forward = 0.0;
  double h_reversed = 0.0;
  double gap = 0.0;
  std::size_t samples = 0;  // 0 = posterior mean predictive
  std::size_t tokens = 0;
};

// samples == 0 evaluates the posterior-mean predictive (rng untouched);
// samples >= 1 averages the per-position predictive distribution over S
// posterior draws before taking entropies. The same draws are reused for
// the forward and reversed passes, so evaluating the reversed corpus with
// an equally-seeded rng negates the gap exactly.
EntropyGapReport entropy_gap(const Posterior& post,
                             std::span<const std::int32_t> ids,
                             std::size_t samples, Rng& rng);

// Per-word entropy of the corpus's empirical unigram distribution in nats;
// the context-free reference the gap is read against.
double unigram_entropy(std::span<const std::int32_t> ids);

}  // namespace brnn
