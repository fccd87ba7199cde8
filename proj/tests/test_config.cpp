#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "brnn/config.hpp"
#include "brnn/errors.hpp"
#include "doctest.h"

using namespace brnn;

TEST_CASE("config: defaults, round trip, canonical form") {
  // The empty document is the default config.
  RunConfig def = parse_config_text("");
  CHECK(def.layers == 1);
  CHECK(def.hidden == 64);
  CHECK(def.vocab_mode == TokenMode::Word);
  CHECK(def.trainer.seed == 1);
  CHECK(canonical_config(def) == canonical_config(RunConfig{}));

  // Every field set away from its default survives serialize -> parse with
  // numbers reproduced bit for bit.
  RunConfig rc;
  rc.hidden = 24;
  rc.embedding = 12;
  rc.vocab_mode = TokenMode::Char;
  rc.min_count = 3;
  rc.trainer.unroll = 7;
  rc.trainer.batch_size = 3;
  rc.trainer.groups = 2;
  rc.trainer.learning_rate = 0.1;  // not representable exactly: the acid test
  rc.trainer.lr_decay = 0.97;
  rc.trainer.decay_after = 11;
  rc.trainer.clip_norm = 2.5;
  rc.epochs = 9;
  rc.trainer.seed = 123456789012345ull;
  rc.trainer.prior.pi = 0.75;
  rc.trainer.prior.sigma1 = 0.36787944117144233;
  rc.trainer.prior.sigma2 = 0.0009118819655545162;
  rc.sharpen = true;
  rc.sharpening.sigma0 = 0.02;
  rc.sharpening.eta_init = 0.001;
  rc.sharpening.second_order = false;
  rc.sharpening.outer_kl_uses_b = true;
  rc.eval_mode = EvalMode::MonteCarlo;
  rc.eval_samples = 32;
  rc.corpus = "data/train.txt";
  rc.valid = "data/valid.txt";
  rc.checkpoint = "out/model.ck";
  rc.metrics = "out/metrics.jsonl";

  const std::string text = canonical_config(rc);
  RunConfig back = parse_config_text(text);
  CHECK(canonical_config(back) == text);
  CHECK(back.trainer.learning_rate == rc.trainer.learning_rate);
  CHECK(back.trainer.prior.sigma1 == rc.trainer.prior.sigma1);
  CHECK(back.trainer.prior.sigma2 == rc.trainer.prior.sigma2);
  CHECK(back.trainer.seed == rc.trainer.seed);
  CHECK(back.sharpen);
  CHECK(back.sharpening.outer_kl_uses_b);
  CHECK_FALSE(back.sharpening.second_order);
  CHECK(back.eval_mode == EvalMode::MonteCarlo);
  CHECK(back.corpus == "data/train.txt");
  CHECK(back.min_count == 3);

  // Comments, blank lines and loose spacing are tolerated.
  RunConfig loose = parse_config_text(
      "# a comment\n"
      "\n"
      "   model.hidden=8\n"
      "trainer.lr =  0.25  \n");
  CHECK(loose.hidden == 8);
  CHECK(loose.trainer.learning_rate == 0.25);
  CHECK(loose.embedding == 32);
}

TEST_CASE("config: unknown keys, duplicates, and bad values are rejected") {
  CHECK_THROWS_AS(parse_config_text("model.hiden = 8\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("trainer.lr = 0.1\ntrainer.lr = 0.2\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config_text("trainer.lr = banana\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("trainer.lr = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("trainer.seed = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.layers = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.hidden = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.min_count = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("prior.pi = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("prior.pi = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("sharpening.sigma0 = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("eval.mode = typical\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("eval.samples = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.vocab_mode = byte\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("sharpening.enabled = maybe\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config_text("just some text\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("= 5\n"), ConfigError);
}

TEST_CASE("config: environment seed override") {
  RunConfig rc;
  rc.trainer.seed = 7;
  CHECK(unsetenv("BRNN_SEED") == 0);
  apply_env_overrides(rc);
  CHECK(rc.trainer.seed == 7);

  CHECK(setenv("BRNN_SEED", "99", 1) == 0);
  apply_env_overrides(rc);
  CHECK(rc.trainer.seed == 99);

  CHECK(setenv("BRNN_SEED", "nope", 1) == 0);
  CHECK_THROWS_AS(apply_env_overrides(rc), ConfigError);
  CHECK(unsetenv("BRNN_SEED") == 0);
}

TEST_CASE("config: file loading") {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "brnn_config_test.cfg";
  {
    std::ofstream out(p);
    out << "model.hidden = 16\nmodel.embedding = 5\n";
  }
  RunConfig rc = load_config(p.string());
  CHECK(rc.hidden == 16);
  CHECK(rc.embedding == 5);
  fs::remove(p);
  CHECK_THROWS_AS(load_config(p.string()), StorageError);
}
