// Posterior sharpening: a hierarchical posterior whose inner mean is shifted
// along the per-batch negative data gradient,
//     theta ~ N(phi - eta * g_phi, sigma0^2 I),   g_phi = dNLL/dphi,
// trained with the loss
//     L = NLL(theta) + |eta * g_phi|^2 / (2 sigma0^2)
//         + w_outer * (log q(phi) - log p(phi)),
// where the middle term is the exact KL between the sharpened posterior and
// the hierarchical prior N(phi, sigma0^2 I), and w_outer defaults to 1/C.
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/lstm.hpp"
#include "brnn/trainer.hpp"
#include "brnn/variational.hpp"

namespace brnn {

struct SharpeningConfig {
  double sigma0 = 0.02;     // stddev of the inner noise and hierarchical prior
  double eta_init = 0.01;   // initial per-coordinate step size
  bool second_order = true; // differentiate through g_phi; false stops gradient
  bool outer_kl_uses_b = false;  // divide the outer KL by B*C instead of C

  void validate() const;  // ContractError on sigma0 <= 0
};

// One per-coordinate eta tensor per model parameter, filled with eta_init.
ParamMap make_eta(const LstmDims& dims, double eta_init);

struct SharpenedSample {
  ParamMap phi;     // outer draw from q(phi)
  ParamMap g_phi;   // dNLL/dphi at phi
  ParamMap theta;   // inner draw: (phi - eta*g_phi) + sigma0*eps2
  ParamMap eps2;    // inner standard-normal noise
};

// Inner sampling step on a tape; differentiable wherever inputs are tape
// nodes. theta[name] = (phi - eta*g) + sigma0*eps2, elementwise.
ParamMap sharpen_on_tape(Tape& tape, const ParamMap& phi, const ParamMap& g_phi,
                         const ParamMap& eta, double sigma0,
                         const ParamMap& eps2);

// Off-tape ancestral draw given phi and its gradient; draws eps2 from rng.
SharpenedSample sharpen_sample(const ParamMap& phi, const ParamMap& g_phi,
                               const ParamMap& eta, double sigma0, Rng& rng);

// Exact equal-covariance Gaussian KL between N(phi - eta*g, sigma0^2 I) and
// N(phi, sigma0^2 I): |eta*g|^2 / (2 sigma0^2). Scalar tape node / double.
Tensor sharpening_kl(Tape& tape, const ParamMap& eta, const ParamMap& g_phi,
                     double sigma0);
double sharpening_kl_value(const ParamMap& eta, const ParamMap& g_phi,
                           double sigma0);

struct SharpenState {
  Posterior post;
  ParamMap eta;
  Rng rng{1};
  double lr = 1.0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  LstmState carry;
};

SharpenState make_sharpen_state(const TrainConfig& cfg,
                                const SharpeningConfig& scfg,
                                const LstmDims& dims);

struct SharpStepMetrics {
  double nll = 0.0;       // NLL at the sharpened theta
  double kl_sharp = 0.0;  // exact inner KL
  double kl_outer = 0.0;  // single-sample log q(phi) - log p(phi)
  double w_outer = 0.0;   // weight applied to kl_outer
  double loss = 0.0;      // nll + kl_sharp + w_outer * kl_outer
  double update_norm = 0.0;
  std::size_t tokens = 0;
  bool skipped = false;
};

// Introspection of one step: the draws and the raw (pre-clip, pre-lr) loss
// gradients for each parameter group.
struct SharpStepDebug {
  ParamMap phi, g_phi, theta, eps2;
  ParamMap grad_mu, grad_rho, grad_eta;
};

// One sharpened step: sample phi, backprop NLL(phi) for g_phi, sample theta,
// build the loss above, backprop to (mu, rho, eta), apply a clipped SGD step.
// eps1/eps2 override the outer/inner noise draws when non-null (testing).
SharpStepMetrics sharpened_train_step(SharpenState& st, const TrainConfig& cfg,
                                      const SharpeningConfig& scfg,
                                      const CutBatch& cut, std::size_t b_count,
                                      std::size_t c_count,
                                      const ParamMap* eps1 = nullptr,
                                      const ParamMap* eps2 = nullptr,
                                      SharpStepDebug* debug = nullptr);

struct SharpEpochMetrics {
  double nll = 0.0;
  double kl_sharp = 0.0;
  double kl_outer = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
  std::size_t steps = 0;
  std::size_t skipped = 0;
};

SharpEpochMetrics sharpened_run_epoch(SharpenState& st, const TrainConfig& cfg,
                                      const SharpeningConfig& scfg,
                                      const CutPlan& plan);

// Evaluation-time lower bound on mean log-probability per token:
//   E_{q(phi)} [ E_{q(theta|phi,x)} [ log p(x|theta) ] - KL_sharp ],
// estimated with one fresh phi and eps2 per cut, repeated for `samples` full
// passes over the plan. exp(-per_token) is an upper bound on perplexity.
struct BoundEstimate {
  double per_token = 0.0;           // mean of per_sample
  std::vector<double> per_sample;   // one bound estimate per pass
  std::size_t tokens = 0;           // tokens per pass
};

BoundEstimate eval_bound(const Posterior& post, const ParamMap& eta,
                         const SharpeningConfig& scfg, const CutPlan& plan,
                         std::size_t samples, Rng& rng);

}  // namespace brnn
