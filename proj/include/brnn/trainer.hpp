#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "brnn/data.hpp"
#include "brnn/lstm.hpp"
#include "brnn/variational.hpp"

namespace brnn {

// Mixture is the real prior; MatchPosterior substitutes log p := log
// N(theta|mu, sigma^2), making every KL gradient vanish identically — the
// hook that reduces a step to plain SGD on the likelihood for tests.
enum class PriorKind { Mixture, MatchPosterior };

struct TrainConfig {
  std::size_t unroll = 20;       // T, tokens per truncated window
  std::size_t batch_size = 8;    // parallel streams
  std::size_t groups = 1;        // paper-style minibatch count B
  double learning_rate = 1.0;
  double lr_decay = 1.0;         // multiplied in after decay_after epochs
  std::size_t decay_after = 0;
  double clip_norm = 5.0;        // <= 0 disables clipping
  MixturePrior prior;
  PriorKind prior_kind = PriorKind::Mixture;
  bool deterministic = false;    // theta = mu, KL off: plain SGD baseline
  std::uint64_t seed = 1;
};

struct TrainState {
  Posterior post;
  Rng rng{1};
  double lr = 1.0;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // completed (applied or skipped) cuts
  LstmState carry;        // s_prev for the cut about to run
};

TrainState make_train_state(const TrainConfig& cfg, const LstmDims& dims);

struct StepMetrics {
  double nll = 0.0;        // total nats over the cut
  double kl = 0.0;         // single-sample log q - log p (0 when disabled)
  double w_kl = 0.0;       // 1/(B*C)
  double objective = 0.0;  // nll + w_kl * kl
  double update_norm = 0.0;  // pre-clip global norm of the applied update
  std::size_t tokens = 0;
  bool skipped = false;
};

// Test-inspection hook: the sampled parameters/noise and the pre-clip,
// pre-learning-rate Fig.-1 update direction for every mu and rho.
struct StepDebug {
  std::map<std::string, Tensor> theta;
  std::map<std::string, Tensor> eps;
  std::map<std::string, Tensor> u_mu;
  std::map<std::string, Tensor> u_rho;
};

double kl_weight(std::size_t b_count, std::size_t c_count);

// One cut: sample theta = mu + sigma*eps once, NLL forward/backward for the
// data gradient g, a second pass for the KL gradients w.r.t. (theta, mu,
// sigma), then the assembled updates
//   u_mu  = (g + gkl_theta/C)/B + gkl_mu/(B C)
//   u_rho = [ ((g + gkl_theta/C)/B) * eps + gkl_sigma/(B C) ] * sigmoid(rho)
// clipped jointly to cfg.clip_norm and applied with the current learning
// rate. A non-finite loss or update skips the step with state untouched.
StepMetrics train_step(TrainState& st, const TrainConfig& cfg,
                       const CutBatch& cut, std::size_t b_count,
                       std::size_t c_count,
                       const std::map<std::string, Tensor>* eps_override =
                           nullptr,
                       StepDebug* debug = nullptr);

struct EpochMetrics {
  double nll = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  double total_w = 0.0;  // sum of applied KL weights; exactly 1 per epoch
  double perplexity = 0.0;
  std::size_t tokens = 0;
  std::size_t steps = 0;
  std::size_t skipped = 0;
};

// Visits every cut of the plan in order, resetting the carried state at
// epoch start and at each group boundary, then applies learning-rate decay.
EpochMetrics run_epoch(TrainState& st, const TrainConfig& cfg,
                       const CutPlan& plan);

}  // namespace brnn
