// Command-line workbench around the library: train a Bayes-by-backprop LSTM
// language model, evaluate perplexity three ways, measure the forward/reverse
// entropy gap, run the signal-to-noise pruning sweep, and sample text.
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "brnn/checkpoint.hpp"
#include "brnn/config.hpp"
#include "brnn/data.hpp"
#include "brnn/errors.hpp"
#include "brnn/evaluation.hpp"
#include "brnn/pruning.hpp"
#include "brnn/sharpening.hpp"
#include "brnn/trainer.hpp"
#include "json.hpp"

namespace {

using brnn::Checkpoint;
using brnn::ConfigError;
using brnn::EvalMode;
using brnn::EvalReport;
using brnn::LstmDims;
using brnn::RunConfig;
using brnn::Vocab;
using json = nlohmann::ordered_json;

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// More than this fraction of skipped (non-finite) steps in an epoch aborts
// the run as numerically diverged.
constexpr double kSkipBudget = 0.1;

double flag_to_double(const std::string& flag, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError(flag + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::string vocab_path(const std::string& checkpoint_path) {
  return checkpoint_path + ".vocab";
}

struct LoadedModel {
  Checkpoint ck;
  Vocab vocab;
};

LoadedModel load_model(const std::string& ck_path) {
  LoadedModel m{brnn::load_checkpoint(ck_path),
                Vocab::load(vocab_path(ck_path), brnn::TokenMode::Word)};
  m.vocab = Vocab::load(vocab_path(ck_path), m.ck.config.vocab_mode);
  if (m.vocab.size() != m.ck.post.dims.vocab) {
    throw ConfigError("vocabulary at " + vocab_path(ck_path) + " has " +
                      std::to_string(m.vocab.size()) +
                      " entries but the checkpoint was trained with " +
                      std::to_string(m.ck.post.dims.vocab));
  }
  return m;
}

std::vector<std::int32_t> encode_corpus(const LoadedModel& m,
                                        const std::string& corpus_path) {
  return m.vocab.encode(brnn::load_text_file(corpus_path));
}

void print_report(const EvalReport& r) {
  json rec;
  rec["mode"] = brnn::eval_mode_name(r.mode);
  rec["nll_per_token"] = r.nll;
  rec["perplexity"] = r.perplexity;
  rec["tokens"] = r.tokens;
  rec["samples"] = r.samples;
  rec["se"] = r.se;
  rec["upper_bound"] = r.upper_bound;
  std::cout << rec.dump() << "\n";
  if (r.upper_bound) {
    std::cout << "upper bound on perplexity: " << r.perplexity << "\n";
  }
}

// ---------------------------------------------------------------- train ----

struct TrainFlags {
  std::string config_path;
  std::int64_t epochs = -1;       // <0: keep config value
  std::int64_t seed = -1;         // <0: keep config/env value
  std::string sharpening;         // "", "on", "off"
  bool timings = false;
};

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) {
    if (!path.empty()) {
      out_.open(path, std::ios::app);
      if (!out_) throw brnn::StorageError("cannot open metrics file " + path);
    }
  }
  void write(json& rec) {
    if (!out_.is_open()) return;
    out_ << rec.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

RunConfig resolve_train_config(const TrainFlags& flags) {
  RunConfig rc = brnn::load_config(flags.config_path);
  brnn::apply_env_overrides(rc);
  if (flags.epochs >= 0) rc.epochs = static_cast<std::size_t>(flags.epochs);
  if (flags.seed >= 0) rc.trainer.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.sharpening == "on") rc.sharpen = true;
  if (flags.sharpening == "off") rc.sharpen = false;
  rc.validate();
  return rc;
}

void check_skip_budget(std::size_t skipped, std::size_t steps) {
  if (static_cast<double>(skipped) >
      kSkipBudget * static_cast<double>(steps)) {
    throw brnn::NumericError("diverged: " + std::to_string(skipped) + " of " +
                             std::to_string(steps) +
                             " steps in the last epoch were non-finite");
  }
}

int cmd_train(const TrainFlags& flags) {
  RunConfig rc = resolve_train_config(flags);
  if (rc.corpus.empty()) throw ConfigError("paths.corpus is required to train");

  const std::string text = brnn::load_text_file(rc.corpus);
  const Vocab vocab = Vocab::build(text, rc.vocab_mode, rc.min_count);
  const std::vector<std::int32_t> ids = vocab.encode(text);
  const LstmDims dims{vocab.size(), rc.embedding, rc.hidden};
  const brnn::CutPlan plan = brnn::make_cuts(
      ids, rc.trainer.batch_size, rc.trainer.unroll, rc.trainer.groups);

  // The fully resolved config, verbatim, before anything else happens.
  std::cout << canonical_config(rc);

  MetricsWriter metrics(rc.metrics);
  if (!rc.checkpoint.empty()) vocab.save(vocab_path(rc.checkpoint));

  brnn::TrainState st;
  brnn::SharpenState sst;
  if (rc.sharpen) {
    sst = brnn::make_sharpen_state(rc.trainer, rc.sharpening, dims);
  } else {
    st = brnn::make_train_state(rc.trainer, dims);
  }

  using clock = std::chrono::steady_clock;
  for (std::size_t epoch = 0; epoch < rc.epochs; ++epoch) {
    double ep_nll = 0.0;
    std::size_t ep_tokens = 0, skipped = 0;
    if (rc.sharpen) {
      sst.carry = {};
    } else {
      st.carry = {};
    }
    for (const brnn::CutBatch& cut : plan.cuts) {
      const auto t0 = clock::now();
      json rec;
      if (rc.sharpen) {
        if (!cut.carried) sst.carry = {};
        brnn::SharpStepMetrics sm = brnn::sharpened_train_step(
            sst, rc.trainer, rc.sharpening, cut, plan.b_count, plan.c_count);
        rec["step"] = sst.step;
        rec["nll_per_token"] =
            sm.tokens ? sm.nll / static_cast<double>(sm.tokens) : 0.0;
        rec["weighted_kl"] = sm.w_outer * sm.kl_outer;
        rec["sharpening_kl"] = sm.kl_sharp;
        rec["lr"] = sst.lr;
        if (sm.skipped) ++skipped;
        ep_nll += sm.nll;
        ep_tokens += sm.tokens;
      } else {
        if (!cut.carried) st.carry = {};
        brnn::StepMetrics sm = brnn::train_step(st, rc.trainer, cut,
                                                plan.b_count, plan.c_count);
        rec["step"] = st.step;
        rec["nll_per_token"] =
            sm.tokens ? sm.nll / static_cast<double>(sm.tokens) : 0.0;
        rec["weighted_kl"] = sm.w_kl * sm.kl;
        rec["sharpening_kl"] = 0.0;
        rec["lr"] = st.lr;
        if (sm.skipped) ++skipped;
        ep_nll += sm.nll;
        ep_tokens += sm.tokens;
      }
      if (flags.timings) {
        rec["wall_ms"] =
            std::chrono::duration<double, std::milli>(clock::now() - t0)
                .count();
      }
      metrics.write(rec);
    }
    // Mirrors the library's epoch bookkeeping (run_epoch) step for step.
    if (rc.sharpen) {
      ++sst.epoch;
      if (sst.epoch >= rc.trainer.decay_after && rc.trainer.lr_decay != 1.0) {
        sst.lr *= rc.trainer.lr_decay;
      }
    } else {
      ++st.epoch;
      if (st.epoch >= rc.trainer.decay_after && rc.trainer.lr_decay != 1.0) {
        st.lr *= rc.trainer.lr_decay;
      }
    }
    std::cout << "epoch " << (epoch + 1) << " nll/token "
              << (ep_tokens ? ep_nll / static_cast<double>(ep_tokens) : 0.0)
              << " skipped " << skipped << "\n";

    if (!rc.checkpoint.empty()) {
      Checkpoint ck;
      if (rc.sharpen) {
        brnn::TrainState tmp;
        tmp.post = sst.post;
        tmp.rng = brnn::Rng::restore(sst.rng.seed(), sst.rng.draws());
        tmp.lr = sst.lr;
        tmp.epoch = sst.epoch;
        tmp.step = sst.step;
        tmp.carry = sst.carry;
        ck = brnn::checkpoint_of(rc, tmp, &sst.eta);
      } else {
        ck = brnn::checkpoint_of(rc, st);
      }
      brnn::save_checkpoint(ck, rc.checkpoint);
    }
    check_skip_budget(skipped, plan.cuts.size());
  }

  // Final validation perplexity in the configured evaluation mode.
  std::vector<std::int32_t> vids = ids;
  if (!rc.valid.empty()) {
    vids = vocab.encode(brnn::load_text_file(rc.valid));
  }
  const brnn::Posterior& post = rc.sharpen ? sst.post : st.post;
  EvalReport report;
  brnn::Rng eval_rng(rc.trainer.seed);
  switch (rc.eval_mode) {
    case EvalMode::Map:
      report = brnn::eval_map(post, vids, rc.trainer.unroll);
      break;
    case EvalMode::MonteCarlo:
      report = brnn::eval_mc(post, vids, rc.trainer.unroll, rc.eval_samples,
                             eval_rng);
      break;
    case EvalMode::Sharpened:
      if (!rc.sharpen) {
        throw ConfigError("eval.mode = sharpened needs sharpening.enabled");
      }
      report = brnn::eval_sharpened(post, sst.eta, rc.sharpening, vids,
                                    rc.trainer.unroll, rc.eval_samples,
                                    eval_rng);
      break;
  }
  std::cout << "validation ";
  print_report(report);
  return 0;
}

// ----------------------------------------------------------------- eval ----

int cmd_eval(const std::string& ck_path, const std::string& corpus,
             const std::string& mode, std::uint64_t seed) {
  LoadedModel m = load_model(ck_path);
  const std::vector<std::int32_t> ids = encode_corpus(m, corpus);
  const std::size_t steps = m.ck.config.trainer.unroll;

  const auto parts = split(mode, ':');
  const std::string kind = parts.empty() ? "" : parts[0];
  std::size_t samples = m.ck.config.eval_samples;
  if (parts.size() > 2 ||
      (kind != "map" && kind != "mc" && kind != "sharpened")) {
    throw ConfigError("--mode: expected map, mc[:S] or sharpened[:S], got '" +
                      mode + "'");
  }
  if (parts.size() == 2) {
    const double s = flag_to_double("--mode", parts[1]);
    if (s < 1 || s != std::floor(s)) {
      throw ConfigError("--mode: sample count must be a positive integer");
    }
    samples = static_cast<std::size_t>(s);
  }

  brnn::Rng rng(seed);
  EvalReport report;
  if (kind == "map") {
    report = brnn::eval_map(m.ck.post, ids, steps);
  } else if (kind == "mc") {
    report = brnn::eval_mc(m.ck.post, ids, steps, samples, rng);
  } else {
    if (!m.ck.eta) {
      throw ConfigError(
          "checkpoint holds no sharpening state; train with "
          "sharpening.enabled = true");
    }
    report = brnn::eval_sharpened(m.ck.post, *m.ck.eta, m.ck.config.sharpening,
                                  ids, steps, samples, rng);
  }
  print_report(report);
  return 0;
}

// ---------------------------------------------------------- entropy gap ----

int cmd_entropy_gap(const std::string& ck_path, const std::string& corpus,
                    const std::string& samples_list, std::uint64_t seed) {
  LoadedModel m = load_model(ck_path);
  const std::vector<std::int32_t> ids = encode_corpus(m, corpus);

  std::vector<std::size_t> sample_counts;
  for (const std::string& tok : split(samples_list, ',')) {
    const double v = flag_to_double("--samples", tok);
    if (v < 0 || v != std::floor(v)) {
      throw ConfigError("--samples: expected non-negative integers");
    }
    sample_counts.push_back(static_cast<std::size_t>(v));
  }
  if (sample_counts.empty()) {
    throw ConfigError("--samples: need at least one value");
  }

  std::cout << "samples,gap,h_forward,h_reversed\n";
  for (std::size_t s : sample_counts) {
    brnn::Rng rng(seed);
    brnn::EntropyGapReport r = brnn::entropy_gap(m.ck.post, ids, s, rng);
    std::cout << s << "," << r.gap << "," << r.h_forward << ","
              << r.h_reversed << "\n";
  }
  std::cout << "# unigram entropy per token: " << brnn::unigram_entropy(ids)
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- prune ----

int cmd_prune(const std::string& ck_path, const std::string& corpus,
              const std::string& fractions_list, const std::string& grids_dir) {
  LoadedModel m = load_model(ck_path);
  const std::vector<std::int32_t> ids = encode_corpus(m, corpus);

  std::vector<double> fractions;
  for (const std::string& tok : split(fractions_list, ',')) {
    const double f = flag_to_double("--fractions", tok);
    if (f < 0.0 || f > 1.0) {
      throw ConfigError("--fractions: values must lie in [0, 1]");
    }
    fractions.push_back(f);
  }
  if (fractions.empty() || !std::is_sorted(fractions.begin(), fractions.end())) {
    throw ConfigError("--fractions: need an ascending list in [0, 1]");
  }

  const auto rows = brnn::prune_sweep(m.ck.post, ids, fractions,
                                      m.ck.config.trainer.unroll);
  std::cout << "fraction,dropped,total,perplexity,nll_per_token\n";
  for (const auto& row : rows) {
    std::cout << row.fraction << "," << row.dropped << "," << row.mask.total
              << "," << row.report.perplexity << "," << row.report.nll << "\n";
    if (!grids_dir.empty()) {
      char sub[32];
      std::snprintf(sub, sizeof sub, "f%.2f", row.fraction);
      const std::filesystem::path dir =
          std::filesystem::path(grids_dir) / sub;
      std::filesystem::create_directories(dir);
      brnn::save_mask_grids(row.mask, m.ck.post, dir.string());
    }
  }
  return 0;
}

// --------------------------------------------------------------- sample ----

int cmd_sample(const std::string& ck_path, std::uint64_t length,
               const std::string& mode, std::uint64_t seed) {
  LoadedModel m = load_model(ck_path);
  if (mode != "map" && mode != "posterior") {
    throw ConfigError("--mode: expected map or posterior, got '" + mode + "'");
  }
  brnn::Rng rng(seed);
  const brnn::ParamMap params = mode == "map"
                                    ? brnn::mean_params(m.ck.post)
                                    : brnn::sample_leaves(m.ck.post, rng).theta;

  std::vector<std::int32_t> out;
  brnn::LstmState state =
      brnn::zero_state(1, m.ck.post.dims.hidden);
  std::int32_t input = 0;  // fixed start token: the empty-prefix convention
  const std::size_t v = m.ck.post.dims.vocab;
  for (std::uint64_t i = 0; i < length; ++i) {
    brnn::Tape tape(false);
    const std::int32_t in[1] = {input};
    brnn::UnrollOut step = brnn::unroll(tape, params, in, 1, 1, state);
    state = brnn::detach_state(step.state);
    const auto logits = step.logits.values();
    double mx = logits[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, (double)logits[j]);
    double denom = 0.0;
    std::vector<double> p(v);
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(static_cast<double>(logits[j]) - mx);
      denom += p[j];
    }
    const double u = rng.uniform() * denom;
    double cum = 0.0;
    std::int32_t pick = static_cast<std::int32_t>(v) - 1;
    for (std::size_t j = 0; j < v; ++j) {
      cum += p[j];
      if (u <= cum) {
        pick = static_cast<std::int32_t>(j);
        break;
      }
    }
    out.push_back(pick);
    input = pick;
  }
  if (!out.empty()) std::cout << m.vocab.decode(out) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian LSTM language-model workbench"};
  app.require_subcommand(1);

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", tf.config_path, "run config file")->required();
  train->add_option("--epochs", tf.epochs, "override trainer.epochs");
  train->add_option("--seed", tf.seed,
                    "override trainer.seed (beats BRNN_SEED)");
  train->add_option("--sharpening", tf.sharpening,
                    "override sharpening.enabled (on|off)")
      ->check(CLI::IsMember({"on", "off"}));
  train->add_flag("--timings", tf.timings,
                  "add wall-clock milliseconds to metrics records");

  std::string e_ck, e_corpus, e_mode = "map";
  std::uint64_t e_seed = 1;
  CLI::App* ev = app.add_subcommand("eval", "perplexity of a checkpoint");
  ev->add_option("--checkpoint", e_ck)->required();
  ev->add_option("--corpus", e_corpus)->required();
  ev->add_option("--mode", e_mode, "map | mc[:S] | sharpened[:S]");
  ev->add_option("--seed", e_seed);

  std::string g_ck, g_corpus, g_samples = "0,1,4,16";
  std::uint64_t g_seed = 1;
  CLI::App* gap = app.add_subcommand(
      "entropy-gap", "forward vs reversed per-token entropy");
  gap->add_option("--checkpoint", g_ck)->required();
  gap->add_option("--corpus", g_corpus)->required();
  gap->add_option("--samples", g_samples, "comma list; 0 = posterior mean");
  gap->add_option("--seed", g_seed);

  std::string p_ck, p_corpus, p_fractions = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.95";
  std::string p_grids;
  CLI::App* pr = app.add_subcommand("prune", "signal-to-noise pruning sweep");
  pr->add_option("--checkpoint", p_ck)->required();
  pr->add_option("--corpus", p_corpus)->required();
  pr->add_option("--fractions", p_fractions, "ascending comma list in [0,1]");
  pr->add_option("--grids-dir", p_grids,
                 "write 0/1 mask grids per fraction under this directory");

  std::string s_ck, s_mode = "map";
  std::uint64_t s_len = 80, s_seed = 1;
  CLI::App* sa = app.add_subcommand("sample", "generate text autoregressively");
  sa->add_option("--checkpoint", s_ck)->required();
  sa->add_option("--length", s_len, "tokens to generate");
  sa->add_option("--mode", s_mode, "map | posterior");
  sa->add_option("--seed", s_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(tf);
    if (*ev) return cmd_eval(e_ck, e_corpus, e_mode, e_seed);
    if (*gap) return cmd_entropy_gap(g_ck, g_corpus, g_samples, g_seed);
    if (*pr) return cmd_prune(p_ck, p_corpus, p_fractions, p_grids);
    if (*sa) return cmd_sample(s_ck, s_len, s_mode, s_seed);
  } catch (const brnn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const brnn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
