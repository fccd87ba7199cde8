#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "brnn/data.hpp"
#include "brnn/evaluation.hpp"
#include "brnn/sharpening.hpp"
#include "brnn/trainer.hpp"

namespace brnn {

// Everything a run needs, resolved from a flat `section.key = value` file.
// Unlisted keys take these defaults; unknown keys are rejected.
struct RunConfig {
  // model.*
  std::size_t layers = 1;  // single-layer recurrence is the only supported value
  std::size_t hidden = 64;
  std::size_t embedding = 32;
  TokenMode vocab_mode = TokenMode::Word;
  std::size_t min_count = 1;  // tokens rarer than this become <unk>

  // trainer.* and prior.*; the mixture lives at trainer.prior
  TrainConfig trainer;
  std::size_t epochs = 1;

  // sharpening.*
  bool sharpen = false;
  SharpeningConfig sharpening;

  // eval.*
  EvalMode eval_mode = EvalMode::Map;
  std::size_t eval_samples = 1;

  // paths.*
  std::string corpus;
  std::string valid;  // empty: validate on the training corpus
  std::string checkpoint;
  std::string metrics;

  void validate() const;  // ConfigError on any out-of-range value
};

// Syntax layer: one `key = value` per line, full-line '#' comments, blank
// lines ignored, keys and values trimmed. Duplicate keys are rejected.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// Schema layer over a parsed map: types each known key, rejects unknowns,
// then validates ranges.
RunConfig config_from_kv(const std::map<std::string, std::string>& kv);

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);  // StorageError if unreadable

// The fully resolved document, fixed key order, one key per line. Doubles are
// printed so they parse back to the identical bits.
std::string canonical_config(const RunConfig& rc);

// BRNN_SEED, when set, overrides trainer.seed; ConfigError if unparseable.
void apply_env_overrides(RunConfig& rc);

const char* token_mode_name(TokenMode m);

}  // namespace brnn
