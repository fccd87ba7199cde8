#include "brnn/sharpening.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace brnn {

void SharpeningConfig::validate() const {
  if (!(sigma0 > 0.0)) {
    throw ContractError("sharpening config: sigma0 must be > 0");
  }
}

ParamMap make_eta(const LstmDims& dims, double eta_init) {
  ParamMap eta;
  for (const auto& [name, shape] : param_layout(dims)) {
    Tensor t = Tensor::full(shape, eta_init);
    t.set_requires_grad(true);
    eta.emplace(name, std::move(t));
  }
  return eta;
}

ParamMap sharpen_on_tape(Tape& tape, const ParamMap& phi, const ParamMap& g_phi,
                         const ParamMap& eta, double sigma0,
                         const ParamMap& eps2) {
  ParamMap theta;
  for (const auto& [name, ph] : phi) {
    Tensor mean = tape.sub(ph, tape.mul(eta.at(name), g_phi.at(name)));
    theta.emplace(name,
                  tape.add(mean, tape.scale(eps2.at(name), sigma0)));
  }
  return theta;
}

SharpenedSample sharpen_sample(const ParamMap& phi, const ParamMap& g_phi,
                               const ParamMap& eta, double sigma0, Rng& rng) {
  SharpenedSample s;
  s.phi = phi;
  s.g_phi = g_phi;
  for (const auto& [name, ph] : phi) {
    Tensor e = Tensor::zeros(ph.shape());
    rng.fill_normal(e.values_mut());
    Tensor th = Tensor::zeros(ph.shape());
    auto tv = th.values_mut();
    auto pv = ph.values();
    auto gv = g_phi.at(name).values();
    auto nv = eta.at(name).values();
    auto ev = e.values();
    for (std::size_t i = 0; i < tv.size(); ++i) {
      tv[i] = static_cast<float>(
          (static_cast<double>(pv[i]) -
           static_cast<double>(nv[i]) * static_cast<double>(gv[i])) +
          sigma0 * static_cast<double>(ev[i]));
    }
    s.eps2.emplace(name, std::move(e));
    s.theta.emplace(name, std::move(th));
  }
  return s;
}

Tensor sharpening_kl(Tape& tape, const ParamMap& eta, const ParamMap& g_phi,
                     double sigma0) {
  if (!(sigma0 > 0.0)) {
    throw ContractError("sharpening_kl: sigma0 must be > 0");
  }
  Tensor total;
  for (const auto& [name, n] : eta) {
    Tensor shift = tape.mul(n, g_phi.at(name));
    Tensor part = tape.sum_all(tape.mul(shift, shift));
    total = total.defined() ? tape.add(total, part) : part;
  }
  return tape.scale(total, 1.0 / (2.0 * sigma0 * sigma0));
}

double sharpening_kl_value(const ParamMap& eta, const ParamMap& g_phi,
                           double sigma0) {
  if (!(sigma0 > 0.0)) {
    throw ContractError("sharpening_kl: sigma0 must be > 0");
  }
  double ss = 0.0;
  for (const auto& [name, n] : eta) {
    auto nv = n.values();
    auto gv = g_phi.at(name).values();
    for (std::size_t i = 0; i < nv.size(); ++i) {
      const double d = static_cast<double>(nv[i]) * static_cast<double>(gv[i]);
      ss += d * d;
    }
  }
  return ss / (2.0 * sigma0 * sigma0);
}

SharpenState make_sharpen_state(const TrainConfig& cfg,
                                const SharpeningConfig& scfg,
                                const LstmDims& dims) {
  scfg.validate();
  if (cfg.prior_kind == PriorKind::Mixture) cfg.prior.validate();
  SharpenState st;
  st.rng = Rng(cfg.seed);
  st.post = make_posterior(dims, st.rng);
  st.eta = make_eta(dims, scfg.eta_init);
  st.lr = cfg.learning_rate;
  return st;
}

namespace {

ParamMap normal_draws(const Posterior& post, Rng& rng) {
  ParamMap eps;
  for (const auto& [name, q] : post.params) {
    Tensor e = Tensor::zeros(q.mu.shape());
    rng.fill_normal(e.values_mut());
    eps.emplace(name, std::move(e));
  }
  return eps;
}

void sgd_apply(Tensor& param, const Tensor& grad, double step_scale) {
  auto pv = param.values_mut();
  auto gv = grad.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    pv[i] = static_cast<float>(static_cast<double>(pv[i]) -
                               step_scale * static_cast<double>(gv[i]));
  }
}

}  // namespace

SharpStepMetrics sharpened_train_step(SharpenState& st, const TrainConfig& cfg,
                                      const SharpeningConfig& scfg,
                                      const CutBatch& cut, std::size_t b_count,
                                      std::size_t c_count,
                                      const ParamMap* eps1,
                                      const ParamMap* eps2,
                                      SharpStepDebug* debug) {
  scfg.validate();
  if (b_count == 0 || c_count == 0) {
    throw ContractError("sharpened_train_step: B and C must be >= 1");
  }
  SharpStepMetrics m;
  m.tokens = cut.y.size();
  m.w_outer = 1.0 / (static_cast<double>(c_count) *
                     (scfg.outer_kl_uses_b ? static_cast<double>(b_count) : 1.0));

  LstmState carry_in = st.carry.defined()
                           ? st.carry
                           : zero_state(cut.batch, st.post.dims.hidden);
  auto flat = flatten_targets(cut.y, cut.batch, cut.steps);

  std::map<std::string, Tensor> grad_mu, grad_rho, grad_eta;
  LstmState out_state;

  try {
    Tape tape;
    Sampled s = eps1 ? sample_on_tape_with(tape, st.post, *eps1)
                     : sample_on_tape(tape, st.post, st.rng);

    // Data gradient at phi; with second_order the gradient computation stays
    // on the tape so the final backward differentiates through it.
    UnrollOut out_phi =
        unroll(tape, s.theta, cut.x, cut.batch, cut.steps, carry_in);
    Tensor nll_phi = tape.log_softmax_nll(out_phi.logits, flat);
    tape.backward(nll_phi, /*create_graph=*/scfg.second_order);
    ParamMap g;
    for (const auto& [name, ph] : s.theta) {
      Tensor gp = ph.grad();
      g.emplace(name, scfg.second_order ? gp : gp.detach());
    }

    ParamMap inner = eps2 ? *eps2 : normal_draws(st.post, st.rng);
    ParamMap theta = sharpen_on_tape(tape, s.theta, g, st.eta, scfg.sigma0,
                                     inner);
    UnrollOut out_theta =
        unroll(tape, theta, cut.x, cut.batch, cut.steps, carry_in);
    Tensor nll_theta = tape.log_softmax_nll(out_theta.logits, flat);
    Tensor kl_inner = sharpening_kl(tape, st.eta, g, scfg.sigma0);
    Tensor kl_outer = kl_sample_estimate(tape, st.post, cfg.prior, s.theta);
    Tensor loss = tape.add(tape.add(nll_theta, kl_inner),
                           tape.scale(kl_outer, m.w_outer));
    tape.backward(loss);

    m.nll = nll_theta.scalar_value();
    m.kl_sharp = kl_inner.scalar_value();
    m.kl_outer = kl_outer.scalar_value();
    m.loss = loss.scalar_value();
    out_state = detach_state(out_theta.state);
    for (const auto& [name, q] : st.post.params) {
      grad_mu.emplace(name, q.mu.grad());
      grad_rho.emplace(name, q.rho.grad());
      grad_eta.emplace(name, st.eta.at(name).grad());
    }
    if (debug) {
      for (const auto& [name, ph] : s.theta) {
        debug->phi.emplace(name, ph.detach());
        debug->g_phi.emplace(name, g.at(name).detach());
        debug->theta.emplace(name, theta.at(name).detach());
        debug->eps2.emplace(name, inner.at(name).detach());
      }
      debug->grad_mu = grad_mu;
      debug->grad_rho = grad_rho;
      debug->grad_eta = grad_eta;
    }
  } catch (const NumericError&) {
    m.skipped = true;
    ++st.step;
    return m;
  }

  std::vector<Tensor> all;
  for (const auto& [name, t] : grad_mu) all.push_back(t);
  for (const auto& [name, t] : grad_rho) all.push_back(t);
  for (const auto& [name, t] : grad_eta) all.push_back(t);
  const double norm = global_norm(all);
  if (!std::isfinite(norm)) {
    m.skipped = true;
    ++st.step;
    return m;
  }
  m.update_norm = norm;

  double scale = 1.0;
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  const double step_scale = st.lr * scale;
  for (auto& [name, q] : st.post.params) {
    sgd_apply(q.mu, grad_mu.at(name), step_scale);
    sgd_apply(q.rho, grad_rho.at(name), step_scale);
    sgd_apply(st.eta.at(name), grad_eta.at(name), step_scale);
  }

  st.carry = out_state;
  ++st.step;
  return m;
}

SharpEpochMetrics sharpened_run_epoch(SharpenState& st, const TrainConfig& cfg,
                                      const SharpeningConfig& scfg,
                                      const CutPlan& plan) {
  if (plan.cuts.size() != plan.b_count * plan.c_count) {
    throw DataError("sharpened_run_epoch: cut plan is not a full B x C grid");
  }
  SharpEpochMetrics em;
  st.carry = {};
  for (const CutBatch& cut : plan.cuts) {
    if (!cut.carried) st.carry = {};
    SharpStepMetrics m = sharpened_train_step(st, cfg, scfg, cut, plan.b_count,
                                              plan.c_count);
    ++em.steps;
    if (m.skipped) {
      ++em.skipped;
      continue;
    }
    em.nll += m.nll;
    em.kl_sharp += m.kl_sharp;
    em.kl_outer += m.kl_outer;
    em.tokens += m.tokens;
  }
  em.perplexity =
      em.tokens > 0 ? std::exp(em.nll / static_cast<double>(em.tokens)) : 0.0;
  ++st.epoch;
  if (cfg.lr_decay != 1.0 && st.epoch >= cfg.decay_after) {
    st.lr *= cfg.lr_decay;
  }
  return em;
}

BoundEstimate eval_bound(const Posterior& post, const ParamMap& eta,
                         const SharpeningConfig& scfg, const CutPlan& plan,
                         std::size_t samples, Rng& rng) {
  scfg.validate();
  if (samples == 0) {
    throw ContractError("eval_bound: samples must be >= 1");
  }
  if (plan.cuts.size() != plan.b_count * plan.c_count) {
    throw DataError("eval_bound: cut plan is not a full B x C grid");
  }
  BoundEstimate est;
  for (std::size_t s = 0; s < samples; ++s) {
    double log_prob = 0.0;
    std::size_t tokens = 0;
    LstmState carry;
    for (const CutBatch& cut : plan.cuts) {
      if (!cut.carried) carry = {};
      LstmState carry_in =
          carry.defined() ? carry : zero_state(cut.batch, post.dims.hidden);
      auto flat = flatten_targets(cut.y, cut.batch, cut.steps);

      // Fresh phi per cut; one backward for its data gradient.
      Sampled ph = sample_leaves(post, rng);
      Tape t1;
      UnrollOut out_phi =
          unroll(t1, ph.theta, cut.x, cut.batch, cut.steps, carry_in);
      t1.backward(t1.log_softmax_nll(out_phi.logits, flat));
      ParamMap g;
      for (const auto& [name, p] : ph.theta) {
        g.emplace(name, p.grad().detach());
      }

      SharpenedSample sh = sharpen_sample(ph.theta, g, eta, scfg.sigma0, rng);
      Tape t2(false);
      UnrollOut out_theta =
          unroll(t2, sh.theta, cut.x, cut.batch, cut.steps, carry_in);
      const double nll =
          t2.log_softmax_nll(out_theta.logits, flat).scalar_value();
      log_prob -= nll;
      log_prob -= sharpening_kl_value(eta, g, scfg.sigma0);
      tokens += cut.y.size();
      carry = detach_state(out_theta.state);
    }
    est.per_sample.push_back(log_prob / static_cast<double>(tokens));
    est.tokens = tokens;
  }
  double sum = 0.0;
  for (double v : est.per_sample) sum += v;
  est.per_token = sum / static_cast<double>(samples);
  return est;
}

}  // namespace brnn
