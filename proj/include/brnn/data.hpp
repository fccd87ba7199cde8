#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brnn/errors.hpp"
#include "brnn/rng.hpp"

namespace brnn {

enum class TokenMode { Char, Word };

// Dense bidirectional token<->id map. Ids are assigned by descending corpus
// count, ties broken lexicographically, so rebuilding from the same text is
// reproducible. When min_count drops tokens (or the corpus already contains
// "<unk>"), unknown tokens encode to the unk id.
class Vocab {
 public:
  static Vocab build(std::string_view text, TokenMode mode,
                     std::size_t min_count = 1);

  std::size_t size() const { return tokens_.size(); }
  TokenMode mode() const { return mode_; }
  bool has_unk() const { return unk_ >= 0; }
  std::int32_t unk_id() const;

  std::int32_t id_of(const std::string& token) const;  // unk fallback
  const std::string& token_of(std::int32_t id) const;

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  // One token per line, id = line number; newlines and backslashes escaped.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path, TokenMode mode);

  static std::vector<std::string> tokenize(std::string_view text,
                                           TokenMode mode);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t> ids_;
  std::int32_t unk_ = -1;
  TokenMode mode_ = TokenMode::Word;
};

// One truncated segment for all parallel streams of one group: inputs x and
// next-token targets y, both stream-major ([s * steps + t]), plus the (b, c)
// label and whether recurrent state carries in from the previous cut.
struct CutBatch {
  std::vector<std::int32_t> x;
  std::vector<std::int32_t> y;
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::size_t b = 0;
  std::size_t c = 0;
  bool carried = false;
};

// An epoch's worth of cuts in training order (group-major, cuts in stream
// order within each group) together with the exact (B, C) bookkeeping the
// KL weighting 1/(B*C) relies on: cuts.size() == b_count * c_count always.
struct CutPlan {
  std::vector<CutBatch> cuts;
  std::size_t b_count = 0;
  std::size_t c_count = 0;
  std::size_t batch = 0;
  std::size_t steps = 0;
};

// Splits ids into `groups` contiguous segments (the paper-style minibatches),
// reshapes each into n parallel streams, and cuts each stream into length-T
// input/target windows, dropping tail remainders. State carries c-1 -> c
// within a group and resets between groups.
CutPlan make_cuts(std::span<const std::int32_t> ids, std::size_t n,
                  std::size_t T, std::size_t groups = 1);

std::vector<std::int32_t> reverse_corpus(std::span<const std::int32_t> ids);

// Deterministic toy grammar: "the ADJ NOUN VERB a ADJ OBJ ." where the noun,
// verb, and object are functions of their preceding adjective. Two free
// choices per 8-token sentence, so the process entropy is 2 ln 6 / 8 per
// word; the adjective class is shared by both slots, so prediction needs
// more than one token of context. 27 distinct words.
std::string generate_grammar_text(std::size_t sentences, Rng& rng);

// Whole-file read; missing/unreadable file throws DataError.
std::string load_text_file(const std::string& path);
void save_text_file(const std::string& path, std::string_view text);

}  // namespace brnn
