#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <vector>

#include "brnn/data.hpp"
#include "doctest.h"

using namespace brnn;

TEST_CASE("vocab ids follow descending count then lexicographic order") {
  Vocab v = Vocab::build("aab", TokenMode::Char);
  CHECK(v.size() == 2);
  CHECK(v.id_of("a") == 0);
  CHECK(v.id_of("b") == 1);
  CHECK_FALSE(v.has_unk());

  Vocab w = Vocab::build("c b a b c a", TokenMode::Word);
  // Equal counts: lexicographic tie-break.
  CHECK(w.id_of("a") == 0);
  CHECK(w.id_of("b") == 1);
  CHECK(w.id_of("c") == 2);

  Vocab again = Vocab::build("c b a b c a", TokenMode::Word);
  for (const char* t : {"a", "b", "c"}) {
    CHECK(again.id_of(t) == w.id_of(t));
  }
}

TEST_CASE("min_count folds rare tokens into unk") {
  Vocab v = Vocab::build("a b b", TokenMode::Word, 2);
  CHECK(v.has_unk());
  CHECK(v.size() == 2);  // "b" and "<unk>"
  CHECK(v.id_of("b") == 0);
  CHECK(v.id_of("a") == v.unk_id());
  CHECK(v.id_of("never-seen") == v.unk_id());

  // A corpus that already spells <unk> reuses it instead of adding another.
  Vocab w = Vocab::build("the <unk> the cat", TokenMode::Word);
  CHECK(w.has_unk());
  CHECK(w.id_of("dog") == w.unk_id());
  CHECK(w.token_of(w.unk_id()) == "<unk>");

  CHECK_THROWS_AS(Vocab::build("", TokenMode::Word), DataError);
  CHECK_THROWS_AS(Vocab::build("a b c", TokenMode::Word, 5), DataError);
}

TEST_CASE("encode/decode round-trips known text") {
  Vocab v = Vocab::build("the cat sat on the mat", TokenMode::Word);
  auto ids = v.encode("the cat sat on the mat");
  CHECK(ids.size() == 6);
  CHECK(v.decode(ids) == "the cat sat on the mat");

  Vocab c = Vocab::build("hello world\n", TokenMode::Char);
  auto cids = c.encode("hello world\n");
  CHECK(c.decode(cids) == "hello world\n");

  Vocab nounk = Vocab::build("a b", TokenMode::Word);
  CHECK_THROWS_AS(nounk.id_of("z"), VocabError);
  CHECK_THROWS_AS(nounk.unk_id(), VocabError);
  CHECK_THROWS_AS(nounk.token_of(17), IndexError);
}

TEST_CASE("vocab persists through its text format, including escapes") {
  // Char vocab over text with newline and space tokens.
  Vocab v = Vocab::build("ab a\\b\nba", TokenMode::Char);
  const std::string path = "vocab_roundtrip.txt";
  v.save(path);
  Vocab back = Vocab::load(path, TokenMode::Char);
  REQUIRE(back.size() == v.size());
  for (std::int32_t i = 0; i < static_cast<std::int32_t>(v.size()); ++i) {
    CHECK(back.token_of(i) == v.token_of(i));
  }
  std::remove(path.c_str());

  Vocab w = Vocab::build("x y y z z z", TokenMode::Word, 2);
  w.save(path);
  Vocab wback = Vocab::load(path, TokenMode::Word);
  CHECK(wback.has_unk());
  CHECK(wback.unk_id() == w.unk_id());
  std::remove(path.c_str());

  CHECK_THROWS_AS(Vocab::load("no-such-vocab-file", TokenMode::Word),
                  DataError);
}

TEST_CASE("cut layout for 13 tokens, two streams, window three") {
  std::vector<std::int32_t> ids(13);
  for (std::size_t i = 0; i < 13; ++i) ids[i] = static_cast<std::int32_t>(i);
  CutPlan plan = make_cuts(ids, 2, 3);
  CHECK(plan.b_count == 1);
  CHECK(plan.c_count == 1);
  REQUIRE(plan.cuts.size() == 1);
  const CutBatch& cb = plan.cuts[0];
  CHECK(cb.x == std::vector<std::int32_t>{0, 1, 2, 6, 7, 8});
  CHECK(cb.y == std::vector<std::int32_t>{1, 2, 3, 7, 8, 9});
  CHECK_FALSE(cb.carried);
}

TEST_CASE("window covering the whole stream yields a single cut") {
  std::vector<std::int32_t> ids(13);
  for (std::size_t i = 0; i < 13; ++i) ids[i] = static_cast<std::int32_t>(i);
  CutPlan plan = make_cuts(ids, 2, 5);
  CHECK(plan.c_count == 1);
  CHECK(plan.cuts[0].x ==
        std::vector<std::int32_t>{0, 1, 2, 3, 4, 6, 7, 8, 9, 10});
}

TEST_CASE("per-stream cut concatenation reproduces the stream minus its tail") {
  std::vector<std::int32_t> ids(14);
  for (std::size_t i = 0; i < 14; ++i) ids[i] = static_cast<std::int32_t>(i);
  CutPlan plan = make_cuts(ids, 2, 3);  // streams of 7, two cuts each
  CHECK(plan.c_count == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<std::int32_t> cat;
    for (const CutBatch& cb : plan.cuts) {
      cat.insert(cat.end(), cb.x.begin() + s * 3, cb.x.begin() + (s + 1) * 3);
    }
    std::vector<std::int32_t> expect;
    for (std::size_t i = 0; i < 6; ++i) {
      expect.push_back(static_cast<std::int32_t>(s * 7 + i));
    }
    CHECK(cat == expect);
  }
}

TEST_CASE("targets shift inputs by one and consecutive cuts abut") {
  std::vector<std::int32_t> ids(26);
  for (std::size_t i = 0; i < 26; ++i) {
    ids[i] = static_cast<std::int32_t>(100 + i);
  }
  CutPlan plan = make_cuts(ids, 3, 2);
  for (const CutBatch& cb : plan.cuts) {
    for (std::size_t s = 0; s < cb.batch; ++s) {
      for (std::size_t t = 0; t + 1 < cb.steps; ++t) {
        CHECK(cb.y[s * cb.steps + t] == cb.x[s * cb.steps + t + 1]);
      }
    }
  }
  for (std::size_t k = 1; k < plan.cuts.size(); ++k) {
    const CutBatch& prev = plan.cuts[k - 1];
    const CutBatch& cur = plan.cuts[k];
    if (!cur.carried) continue;
    for (std::size_t s = 0; s < cur.batch; ++s) {
      CHECK(cur.x[s * cur.steps] == prev.y[s * prev.steps + prev.steps - 1]);
    }
  }
}

TEST_CASE("grouped cuts: B*C bookkeeping, carry flags, full coverage") {
  std::vector<std::int32_t> ids(20);
  for (std::size_t i = 0; i < 20; ++i) ids[i] = static_cast<std::int32_t>(i);
  CutPlan plan = make_cuts(ids, 2, 2, 2);
  CHECK(plan.b_count == 2);
  CHECK(plan.c_count == 2);
  REQUIRE(plan.cuts.size() == 4);
  CHECK(plan.cuts.size() == plan.b_count * plan.c_count);

  std::map<std::int32_t, int> seen;
  for (const CutBatch& cb : plan.cuts) {
    CHECK(cb.carried == (cb.c > 0));
    for (std::int32_t t : cb.x) ++seen[t];
  }
  // Streams have length 5 = 2 cuts * 2 + 1 target tail; every stream token
  // except its last appears exactly once as an input.
  CHECK(seen.size() == 16);
  for (const auto& [tok, n] : seen) CHECK(n == 1);
  for (std::int32_t tail : {4, 9, 14, 19}) CHECK(seen.count(tail) == 0);

  // Second group's first cut starts at the second segment's first token.
  CHECK(plan.cuts[2].b == 1);
  CHECK(plan.cuts[2].x[0] == 10);
}

TEST_CASE("cut construction rejects unusable inputs") {
  std::vector<std::int32_t> ids(5, 0);
  CHECK_THROWS_AS(make_cuts(ids, 2, 3), DataError);
  CHECK_THROWS_AS(make_cuts(ids, 0, 3), ContractError);
  CHECK_THROWS_AS(make_cuts(ids, 2, 0), ContractError);
  CHECK_THROWS_AS(make_cuts(ids, 2, 2, 0), ContractError);
}

TEST_CASE("corpus reversal: involution, multiset, the reversed sentence") {
  std::vector<std::int32_t> ids = {1, 2, 3};
  CHECK(reverse_corpus(ids) == std::vector<std::int32_t>{3, 2, 1});
  std::vector<std::int32_t> longer = {5, 5, 2, 9, 1};
  CHECK(reverse_corpus(reverse_corpus(longer)) == longer);
  auto rev = reverse_corpus(longer);
  auto a = longer, b = rev;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  const std::string sentence = "we may not see them here with us";
  Vocab v = Vocab::build(sentence, TokenMode::Word);
  CHECK(v.decode(reverse_corpus(v.encode(sentence))) ==
        "us with here them see not may we");
}

TEST_CASE("toy grammar: 27-word vocabulary and deterministic pairings") {
  Rng rng(99);
  std::string text = generate_grammar_text(500, rng);
  Vocab v = Vocab::build(text, TokenMode::Word);
  CHECK(v.size() == 27);

  auto toks = Vocab::tokenize(text, TokenMode::Word);
  REQUIRE(toks.size() == 500 * 8);
  std::map<std::string, std::string> adj_to_noun, adj_to_obj, noun_to_verb;
  for (std::size_t s = 0; s < 500; ++s) {
    const auto* t = &toks[s * 8];
    CHECK(t[0] == "the");
    CHECK(t[4] == "a");
    CHECK(t[7] == ".");
    auto check_pair = [](std::map<std::string, std::string>& m,
                         const std::string& k, const std::string& val) {
      auto [it, fresh] = m.emplace(k, val);
      if (!fresh) CHECK(it->second == val);
    };
    check_pair(adj_to_noun, t[1], t[2]);
    check_pair(noun_to_verb, t[2], t[3]);
    check_pair(adj_to_obj, t[5], t[6]);
  }
  // All six choices appear somewhere in 500 sentences.
  CHECK(adj_to_noun.size() == 6);
  CHECK(adj_to_obj.size() == 6);
}

TEST_CASE("text file round-trip and missing-file error") {
  const std::string path = "data_roundtrip.txt";
  save_text_file(path, "line one\nline two\n");
  CHECK(load_text_file(path) == "line one\nline two\n");
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_text_file("no-such-file.txt"), DataError);
}
