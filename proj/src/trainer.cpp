#include "brnn/trainer.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace brnn {

TrainState make_train_state(const TrainConfig& cfg, const LstmDims& dims) {
  if (cfg.unroll == 0 || cfg.batch_size == 0 || cfg.groups == 0) {
    throw ContractError("train config: unroll, batch_size, groups must be >= 1");
  }
  if (cfg.prior_kind == PriorKind::Mixture) cfg.prior.validate();
  TrainState st;
  st.rng = Rng(cfg.seed);
  st.post = make_posterior(dims, st.rng);
  st.lr = cfg.learning_rate;
  return st;
}

double kl_weight(std::size_t b_count, std::size_t c_count) {
  if (b_count == 0 || c_count == 0) {
    throw ContractError("kl_weight: B and C must be >= 1");
  }
  return 1.0 / (static_cast<double>(b_count) * static_cast<double>(c_count));
}

namespace {

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

StepMetrics train_step(TrainState& st, const TrainConfig& cfg,
                       const CutBatch& cut, std::size_t b_count,
                       std::size_t c_count,
                       const std::map<std::string, Tensor>* eps_override,
                       StepDebug* debug) {
  const double w = kl_weight(b_count, c_count);
  StepMetrics m;
  m.w_kl = w;
  m.tokens = cut.y.size();

  LstmState carry_in = st.carry.defined()
                           ? st.carry
                           : zero_state(cut.batch, st.post.dims.hidden);
  auto flat = flatten_targets(cut.y, cut.batch, cut.steps);

  std::map<std::string, Tensor> g, gkl_theta, gkl_mu, gkl_sigma, eps;
  double nll = 0.0, kl = 0.0;
  LstmState out_state;
  const bool with_kl =
      !cfg.deterministic && cfg.prior_kind == PriorKind::Mixture;

  try {
    if (cfg.deterministic) {
      // theta = mu exactly; no noise drawn, no KL term.
      Tape tape;
      ParamMap theta = mean_params(st.post);
      UnrollOut out = unroll(tape, theta, cut.x, cut.batch, cut.steps, carry_in);
      Tensor loss = tape.log_softmax_nll(out.logits, flat);
      tape.backward(loss);
      nll = loss.scalar_value();
      out_state = detach_state(out.state);
      for (const auto& [name, q] : st.post.params) {
        g.emplace(name, q.mu.grad());
      }
    } else {
      Sampled s = eps_override ? sample_leaves_with(st.post, *eps_override)
                               : sample_leaves(st.post, st.rng);
      eps = s.eps;
      if (debug) {
        debug->theta = s.theta;
        debug->eps = s.eps;
      }
      // Likelihood pass: g = dNLL/dtheta with theta as leaves.
      Tape t1;
      UnrollOut out = unroll(t1, s.theta, cut.x, cut.batch, cut.steps, carry_in);
      Tensor loss = t1.log_softmax_nll(out.logits, flat);
      t1.backward(loss);
      nll = loss.scalar_value();
      out_state = detach_state(out.state);
      for (const auto& [name, th] : s.theta) {
        g.emplace(name, th.grad());
      }

      if (with_kl) {
        // KL pass: log N(theta|mu, sigma^2) - log p(theta) with theta, mu,
        // and sigma all leaves, matching the explicit update rule's partials.
        Tape t2;
        std::map<std::string, Tensor> sigmas;
        Tensor kl_t;
        for (const auto& [name, q] : st.post.params) {
          Tensor sigma = sigma_values(q);
          sigma.set_requires_grad(true);
          Tensor part =
              t2.sub(log_gaussian(t2, s.theta.at(name), q.mu, sigma),
                     log_prior_mixture(t2, cfg.prior, s.theta.at(name)));
          kl_t = kl_t.defined() ? t2.add(kl_t, part) : part;
          sigmas.emplace(name, std::move(sigma));
        }
        t2.backward(kl_t);
        kl = kl_t.scalar_value();
        for (const auto& [name, q] : st.post.params) {
          gkl_theta.emplace(name, s.theta.at(name).grad());
          gkl_mu.emplace(name, q.mu.grad());
          gkl_sigma.emplace(name, sigmas.at(name).grad());
        }
      }
    }
  } catch (const NumericError&) {
    m.skipped = true;
    ++st.step;
    return m;
  }

  // Fig.-1 update directions, assembled in double.
  const double B = static_cast<double>(b_count);
  const double C = static_cast<double>(c_count);
  std::map<std::string, Tensor> u_mu, u_rho;
  for (const auto& [name, q] : st.post.params) {
    Tensor um = Tensor::zeros(q.mu.shape());
    auto umv = um.values_mut();
    auto gv = g.at(name).values();
    for (std::size_t i = 0; i < umv.size(); ++i) {
      double data_term = static_cast<double>(gv[i]);
      if (with_kl) {
        data_term += static_cast<double>(gkl_theta.at(name).values()[i]) / C;
      }
      double u = data_term / B;
      if (with_kl) {
        u += static_cast<double>(gkl_mu.at(name).values()[i]) / (B * C);
      }
      umv[i] = static_cast<float>(u);
    }
    u_mu.emplace(name, std::move(um));

    if (!cfg.deterministic) {
      Tensor ur = Tensor::zeros(q.rho.shape());
      auto urv = ur.values_mut();
      auto ev = eps.at(name).values();
      auto rv = q.rho.values();
      for (std::size_t i = 0; i < urv.size(); ++i) {
        double data_term = static_cast<double>(gv[i]);
        if (with_kl) {
          data_term += static_cast<double>(gkl_theta.at(name).values()[i]) / C;
        }
        double us = data_term / B * static_cast<double>(ev[i]);
        if (with_kl) {
          us += static_cast<double>(gkl_sigma.at(name).values()[i]) / (B * C);
        }
        urv[i] = static_cast<float>(us * sigmoid_d(static_cast<double>(rv[i])));
      }
      u_rho.emplace(name, std::move(ur));
    }
  }

  std::vector<Tensor> all_updates;
  for (const auto& [name, t] : u_mu) all_updates.push_back(t);
  for (const auto& [name, t] : u_rho) all_updates.push_back(t);
  const double norm = global_norm(all_updates);
  if (!std::isfinite(norm)) {
    m.skipped = true;
    ++st.step;
    return m;
  }
  m.update_norm = norm;
  if (debug) {
    debug->u_mu = u_mu;
    debug->u_rho = u_rho;
  }

  double scale = 1.0;
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) scale = cfg.clip_norm / norm;

  for (auto& [name, q] : st.post.params) {
    auto mu = q.mu.values_mut();
    auto umv = u_mu.at(name).values();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      mu[i] = static_cast<float>(static_cast<double>(mu[i]) -
                                 st.lr * scale * static_cast<double>(umv[i]));
    }
    if (!cfg.deterministic) {
      auto rho = q.rho.values_mut();
      auto urv = u_rho.at(name).values();
      for (std::size_t i = 0; i < rho.size(); ++i) {
        rho[i] =
            static_cast<float>(static_cast<double>(rho[i]) -
                               st.lr * scale * static_cast<double>(urv[i]));
      }
    }
  }

  st.carry = out_state;
  ++st.step;
  m.nll = nll;
  m.kl = kl;
  m.objective = nll + w * kl;
  return m;
}

EpochMetrics run_epoch(TrainState& st, const TrainConfig& cfg,
                       const CutPlan& plan) {
  if (plan.cuts.size() != plan.b_count * plan.c_count) {
    throw DataError("run_epoch: cut plan is not a full B x C grid");
  }
  EpochMetrics em;
  st.carry = {};
  std::size_t visited = 0;
  for (const CutBatch& cut : plan.cuts) {
    if (!cut.carried) st.carry = {};
    StepMetrics sm =
        train_step(st, cfg, cut, plan.b_count, plan.c_count, nullptr, nullptr);
    ++visited;
    ++em.steps;
    if (sm.skipped) {
      ++em.skipped;
      continue;
    }
    em.nll += sm.nll;
    em.kl += sm.kl;
    em.objective += sm.objective;
    em.tokens += sm.tokens;
  }
  if (visited != plan.b_count * plan.c_count) {
    throw DataError("run_epoch: plan ended mid-stream");
  }
  // Exact by construction: visited/(B*C) with integer visited == B*C.
  em.total_w = static_cast<double>(visited) /
               static_cast<double>(plan.b_count * plan.c_count);
  em.perplexity =
      em.tokens > 0 ? std::exp(em.nll / static_cast<double>(em.tokens)) : 0.0;
  ++st.epoch;
  if (st.epoch >= cfg.decay_after && cfg.lr_decay != 1.0) {
    st.lr *= cfg.lr_decay;
  }
  return em;
}

}  // namespace brnn
