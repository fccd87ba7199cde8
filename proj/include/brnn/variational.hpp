#pragma once

#include <map>
#include <string>

#include "brnn/lstm.hpp"
#include "brnn/rng.hpp"
#include "brnn/tensor.hpp"

namespace brnn {

// Diagonal Gaussian over one parameter tensor; sigma = softplus(rho) keeps
// the scale positive under unconstrained gradient steps.
struct GaussianVariational {
  Tensor mu;
  Tensor rho;
};

// Two-component zero-mean scale mixture: pi N(0, sigma1^2) + (1-pi)
// N(0, sigma2^2), a wide and a narrow component. pi == 1 is allowed as the
// degenerate single-Gaussian case (used heavily by tests and calibration).
struct MixturePrior {
  double pi = 0.25;
  double sigma1 = 0.36787944117144233;    // e^-1
  double sigma2 = 0.0009118819655545162;  // e^-7

  void validate() const;  // throws ContractError when out of domain
};

// Isotropic Gaussian prior with a (possibly tensor) mean; used by the
// hierarchical posterior where p(theta | phi) = N(phi, sigma0^2 I).
struct GaussianPrior {
  Tensor mean;
  double sigma = 1.0;
};

// Posterior over a whole parameter set, one Gaussian per named parameter.
struct Posterior {
  std::map<std::string, GaussianVariational> params;
  LstmDims dims;
};

// rho value giving softplus(rho) == 0.01, the initial posterior width.
double rho_for_sigma(double sigma);

// mu follows the deterministic init (weights U(-0.05, 0.05), forget bias 1),
// rho starts at rho_for_sigma(0.01). Both are gradient leaves.
Posterior make_posterior(const LstmDims& d, Rng& rng);

// sigma = softplus(rho), on tape.
Tensor sigma_of(Tape& tape, const GaussianVariational& q);

struct Sampled {
  ParamMap theta;
  std::map<std::string, Tensor> eps;
};

// theta = mu + softplus(rho) * eps built on the tape, so backward reaches mu
// and rho through the reparameterization. Also returns the noise used.
Sampled sample_on_tape(Tape& tape, const Posterior& post, Rng& rng);
// Same with caller-supplied noise (tests, update-rule cross-checks).
Sampled sample_on_tape_with(Tape& tape, const Posterior& post,
                            const std::map<std::string, Tensor>& eps);

// Same numeric values as sample_on_tape (bit for bit, same float32 op
// order) but returned as detached gradient leaves: the form the explicit
// update-rule path consumes.
Sampled sample_leaves(const Posterior& post, Rng& rng);
Sampled sample_leaves_with(const Posterior& post,
                           const std::map<std::string, Tensor>& eps);

// theta = mu, shared tensors (no copy); the most-probable-weights predictor.
ParamMap mean_params(const Posterior& post);

// softplus(rho) evaluated off-tape, bit-identical to the on-tape op; a
// detached plain tensor (callers mark it as a leaf when they need gradients
// with respect to sigma itself, as the explicit update rule does).
Tensor sigma_values(const GaussianVariational& q);

// Sum over entries of log N(theta | mu, sigma^2) with all three as tape
// tensors; the building block shared by log_q and the update-rule path.
Tensor log_gaussian(Tape& tape, const Tensor& theta, const Tensor& mu,
                    const Tensor& sigma);

// Sum over entries of the diagonal Gaussian log-density at theta, on tape.
Tensor log_q(Tape& tape, const GaussianVariational& q, const Tensor& theta);
Tensor log_q_all(Tape& tape, const Posterior& post, const ParamMap& theta);

// Sum over entries of log(pi N(0,s1^2) + (1-pi) N(0,s2^2)) via log-sum-exp.
Tensor log_prior_mixture(Tape& tape, const MixturePrior& p,
                         const Tensor& theta);
Tensor log_prior_mixture_all(Tape& tape, const MixturePrior& p,
                             const ParamMap& theta);

// Single-sample Monte Carlo estimate of KL(q || p): log q(theta) - log
// p(theta) at one theta drawn from q. The mixture prior admits no closed
// form, so this is always how the prior KL enters training.
Tensor kl_sample_estimate(Tape& tape, const Posterior& post,
                          const MixturePrior& p, const ParamMap& theta);

// Exact diagonal Gaussian-Gaussian KL, accumulated in double. p_mean /
// p_sigma may be size-1 to broadcast. Throws ContractError on sigma <= 0.
double kl_gaussian_gaussian(const Tensor& q_mean, const Tensor& q_sigma,
                            const Tensor& p_mean, const Tensor& p_sigma);
double kl_gaussian_gaussian(double q_mean, double q_sigma, double p_mean,
                            double p_sigma);

}  // namespace brnn
