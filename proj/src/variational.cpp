#include "brnn/variational.hpp"

#include <cmath>
#include <utility>

namespace brnn {

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

// Matches the tape's softplus bit for bit (double evaluation, float store).
float softplus_f(float x) {
  const double d = static_cast<double>(x);
  return static_cast<float>(d > 0.0 ? d + std::log1p(std::exp(-d))
                                    : std::log1p(std::exp(d)));
}

}  // namespace

void MixturePrior::validate() const {
  if (!(pi > 0.0) || !(pi <= 1.0)) {
    throw ContractError("MixturePrior: pi must be in (0, 1]");
  }
  if (!(sigma2 > 0.0) || !(sigma1 > sigma2)) {
    throw ContractError("MixturePrior: need sigma1 > sigma2 > 0");
  }
}

double rho_for_sigma(double sigma) {
  if (!(sigma > 0.0)) throw ContractError("rho_for_sigma: sigma must be > 0");
  return std::log(std::expm1(sigma));
}

Posterior make_posterior(const LstmDims& d, Rng& rng) {
  Posterior post;
  post.dims = d;
  ParamMap mu = init_params(d, rng);
  const double rho0 = rho_for_sigma(0.01);
  for (auto& [name, m] : mu) {
    GaussianVariational q;
    q.mu = std::move(m);
    q.mu.set_requires_grad(true);
    q.rho = Tensor::full(q.mu.shape(), rho0);
    q.rho.set_requires_grad(true);
    post.params.emplace(name, std::move(q));
  }
  return post;
}

Tensor sigma_of(Tape& tape, const GaussianVariational& q) {
  return tape.softplus(q.rho);
}

Sampled sample_on_tape_with(Tape& tape, const Posterior& post,
                            const std::map<std::string, Tensor>& eps) {
  Sampled out;
  for (const auto& [name, q] : post.params) {
    const Tensor& e = eps.at(name);
    if (e.shape() != q.mu.shape()) {
      throw DimensionError("sample_on_tape: eps shape mismatch for " + name);
    }
    Tensor theta = tape.add(q.mu, tape.mul(sigma_of(tape, q), e));
    out.theta.emplace(name, std::move(theta));
    out.eps.emplace(name, e);
  }
  return out;
}

namespace {

std::map<std::string, Tensor> draw_eps(const Posterior& post, Rng& rng) {
  std::map<std::string, Tensor> eps;
  for (const auto& [name, q] : post.params) {
    Tensor e = Tensor::zeros(q.mu.shape());
    rng.fill_normal(e.values_mut());
    eps.emplace(name, std::move(e));
  }
  return eps;
}

}  // namespace

Sampled sample_on_tape(Tape& tape, const Posterior& post, Rng& rng) {
  return sample_on_tape_with(tape, post, draw_eps(post, rng));
}

Sampled sample_leaves_with(const Posterior& post,
                           const std::map<std::string, Tensor>& eps) {
  Sampled out;
  for (const auto& [name, q] : post.params) {
    const Tensor& e = eps.at(name);
    if (e.shape() != q.mu.shape()) {
      throw DimensionError("sample_leaves: eps shape mismatch for " + name);
    }
    Tensor theta = Tensor::zeros(q.mu.shape());
    auto tv = theta.values_mut();
    auto mv = q.mu.values();
    auto rv = q.rho.values();
    auto ev = e.values();
    for (std::size_t i = 0; i < tv.size(); ++i) {
      tv[i] = mv[i] + softplus_f(rv[i]) * ev[i];
    }
    theta.set_requires_grad(true);
    out.theta.emplace(name, std::move(theta));
    out.eps.emplace(name, e);
  }
  return out;
}

Sampled sample_leaves(const Posterior& post, Rng& rng) {
  return sample_leaves_with(post, draw_eps(post, rng));
}

ParamMap mean_params(const Posterior& post) {
  ParamMap p;
  for (const auto& [name, q] : post.params) p.emplace(name, q.mu);
  return p;
}

Tensor sigma_values(const GaussianVariational& q) {
  Tensor s = Tensor::zeros(q.rho.shape());
  auto sv = s.values_mut();
  auto rv = q.rho.values();
  for (std::size_t i = 0; i < sv.size(); ++i) sv[i] = softplus_f(rv[i]);
  return s;
}

Tensor log_gaussian(Tape& tape, const Tensor& theta, const Tensor& mu,
                    const Tensor& sigma) {
  if (theta.shape() != mu.shape() || sigma.shape() != mu.shape()) {
    throw DimensionError("log_gaussian: mismatched shapes");
  }
  Tensor z = tape.sub(theta, mu);
  Tensor quad = tape.div(tape.mul(z, z), tape.scale(tape.mul(sigma, sigma), 2.0));
  Tensor per = tape.neg(
      tape.add_scalar(tape.add(quad, tape.log_(sigma)), kHalfLog2Pi));
  return tape.sum_all(per);
}

Tensor log_q(Tape& tape, const GaussianVariational& q, const Tensor& theta) {
  if (theta.shape() != q.mu.shape()) {
    throw DimensionError("log_q: theta shape " + shape_str(theta.shape()) +
                         " does not match mu " + shape_str(q.mu.shape()));
  }
  return log_gaussian(tape, theta, q.mu, sigma_of(tape, q));
}

Tensor log_q_all(Tape& tape, const Posterior& post, const ParamMap& theta) {
  Tensor total;
  for (const auto& [name, q] : post.params) {
    Tensor part = log_q(tape, q, theta.at(name));
    total = total.defined() ? tape.add(total, part) : part;
  }
  if (!total.defined()) throw ContractError("log_q_all: empty posterior");
  return total;
}

Tensor log_prior_mixture(Tape& tape, const MixturePrior& p,
                         const Tensor& theta) {
  p.validate();
  Tensor sq = tape.mul(theta, theta);
  const double c1 = std::log(p.pi) - std::log(p.sigma1) - kHalfLog2Pi;
  Tensor a = tape.add_scalar(
      tape.scale(sq, -0.5 / (p.sigma1 * p.sigma1)), c1);
  if (p.pi == 1.0) return tape.sum_all(a);
  const double c2 = std::log1p(-p.pi) - std::log(p.sigma2) - kHalfLog2Pi;
  Tensor b = tape.add_scalar(
      tape.scale(sq, -0.5 / (p.sigma2 * p.sigma2)), c2);
  // log(e^a + e^b) = a + softplus(b - a), stable for either ordering.
  Tensor mix = tape.add(a, tape.softplus(tape.sub(b, a)));
  return tape.sum_all(mix);
}

Tensor log_prior_mixture_all(Tape& tape, const MixturePrior& p,
                             const ParamMap& theta) {
  Tensor total;
  for (const auto& [name, t] : theta) {
    Tensor part = log_prior_mixture(tape, p, t);
    total = total.defined() ? tape.add(total, part) : part;
  }
  if (!total.defined()) throw ContractError("log_prior_mixture_all: empty");
  return total;
}

Tensor kl_sample_estimate(Tape& tape, const Posterior& post,
                          const MixturePrior& p, const ParamMap& theta) {
  return tape.sub(log_q_all(tape, post, theta),
                  log_prior_mixture_all(tape, p, theta));
}

double kl_gaussian_gaussian(double q_mean, double q_sigma, double p_mean,
                            double p_sigma) {
  if (!(q_sigma > 0.0) || !(p_sigma > 0.0)) {
    throw ContractError("kl_gaussian_gaussian: sigmas must be > 0");
  }
  const double d = q_mean - p_mean;
  return std::log(p_sigma / q_sigma) +
         (q_sigma * q_sigma + d * d) / (2.0 * p_sigma * p_sigma) - 0.5;
}

double kl_gaussian_gaussian(const Tensor& q_mean, const Tensor& q_sigma,
                            const Tensor& p_mean, const Tensor& p_sigma) {
  const std::size_t n = q_mean.size();
  if (q_sigma.size() != n) {
    throw DimensionError("kl_gaussian_gaussian: q_mean/q_sigma size mismatch");
  }
  if ((p_mean.size() != n && p_mean.size() != 1) ||
      (p_sigma.size() != n && p_sigma.size() != 1)) {
    throw DimensionError("kl_gaussian_gaussian: prior size mismatch");
  }
  auto qm = q_mean.values(), qs = q_sigma.values();
  auto pm = p_mean.values(), ps = p_sigma.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += kl_gaussian_gaussian(
        static_cast<double>(qm[i]), static_cast<double>(qs[i]),
        static_cast<double>(pm[p_mean.size() == 1 ? 0 : i]),
        static_cast<double>(ps[p_sigma.size() == 1 ? 0 : i]));
  }
  return acc;
}

}  // namespace brnn
