#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "brnn/checkpoint.hpp"
#include "brnn/data.hpp"
#include "brnn/errors.hpp"
#include "brnn/sharpening.hpp"
#include "doctest.h"

using namespace brnn;

namespace {

namespace fs = std::filesystem;

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

// Straight-line FNV-1a 64, reimplemented here as the oracle.
std::uint64_t fnv(const std::string& s, std::size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(s[i]);
    h *= 1099511628211ull;
  }
  return h;
}

// Rewrites the trailing checksum after a deliberate mutation.
void refresh_trailer(std::string& bytes) {
  const std::uint64_t h = fnv(bytes, bytes.size() - 8);
  for (int i = 0; i < 8; ++i) {
    bytes[bytes.size() - 8 + i] = static_cast<char>((h >> (8 * i)) & 0xff);
  }
}

std::string error_text(const fs::path& p) {
  try {
    (void)load_checkpoint(p.string());
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// A trained-for-a-moment state so tensors, carry and rng are all nontrivial.
struct Fixture {
  RunConfig rc;
  TrainState st;
  CutPlan plan;
  std::vector<std::int32_t> ids;

  Fixture() {
    Rng gen(5);
    std::string text = generate_grammar_text(60, gen);
    Vocab vocab = Vocab::build(text, TokenMode::Word);
    ids = vocab.encode(text);
    rc.hidden = 6;
    rc.embedding = 4;
    rc.trainer.unroll = 8;
    rc.trainer.batch_size = 4;
    rc.trainer.groups = 2;
    rc.trainer.learning_rate = 0.3;
    rc.trainer.seed = 11;
    st = make_train_state(rc.trainer, {vocab.size(), rc.embedding, rc.hidden});
    plan = make_cuts(ids, rc.trainer.batch_size, rc.trainer.unroll,
                     rc.trainer.groups);
  }

  void steps(std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to; ++k) {
      train_step(st, rc.trainer, plan.cuts[k], plan.b_count, plan.c_count);
    }
  }
};

void check_posteriors_equal(const Posterior& a, const Posterior& b) {
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, qa] : a.params) {
    const auto& qb = b.params.at(name);
    const auto ma = qa.mu.values(), mb = qb.mu.values();
    const auto ra = qa.rho.values(), rb = qb.rho.values();
    REQUIRE(ma.size() == mb.size());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      diff += std::memcmp(&ma[i], &mb[i], 4) != 0;
      diff += std::memcmp(&ra[i], &rb[i], 4) != 0;
    }
    CHECK(diff == 0);
  }
}

}  // namespace

TEST_CASE("checkpoint: bit-exact round trip of tensors, state and config") {
  Fixture fx;
  fx.steps(0, 3);

  ParamMap eta = make_eta(fx.st.post.dims, 0.01);
  Rng noise(3);
  for (auto& [name, t] : eta) noise.fill_uniform(t.values_mut(), 0.0f, 0.05f);

  const fs::path p = temp_file("brnn_ck_roundtrip.ck");
  Checkpoint ck = checkpoint_of(fx.rc, fx.st, &eta);
  save_checkpoint(ck, p.string());
  Checkpoint back = load_checkpoint(p.string());

  check_posteriors_equal(ck.post, back.post);
  CHECK(back.post.dims.vocab == fx.st.post.dims.vocab);
  CHECK(back.post.dims.hidden == fx.rc.hidden);
  REQUIRE(back.eta.has_value());
  for (const auto& [name, t] : eta) {
    const auto a = t.values();
    const auto b = back.eta->at(name).values();
    REQUIRE(a.size() == b.size());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
    CHECK(diff == 0);
  }
  REQUIRE(back.carry.h.defined());
  {
    const auto a = ck.carry.h.values(), b = back.carry.h.values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
  CHECK(back.rng_seed == fx.st.rng.seed());
  CHECK(back.rng_draws == fx.st.rng.draws());
  CHECK(back.epoch == fx.st.epoch);
  CHECK(back.step == fx.st.step);
  CHECK(back.lr == fx.st.lr);
  CHECK(canonical_config(back.config) == canonical_config(fx.rc));

  // Posterior tensors come back as gradient leaves, ready to train.
  CHECK(back.post.params.at("softmax.w").mu.requires_grad());

  // Saving again over the same path replaces the file atomically.
  save_checkpoint(ck, p.string());
  CHECK_FALSE(fs::exists(p.string() + ".tmp"));
  fs::remove(p);
}

TEST_CASE("checkpoint: corruption, truncation, version and magic checks") {
  Fixture fx;
  const fs::path p = temp_file("brnn_ck_corrupt.ck");
  save_checkpoint(checkpoint_of(fx.rc, fx.st), p.string());
  const std::string good = slurp(p);

  // Any single flipped payload byte is caught by the checksum.
  for (std::size_t pos : {5ul, 30ul, good.size() / 2, good.size() - 9}) {
    std::string bad = good;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
    spit(p, bad);
    CHECK(error_text(p).find("checksum") != std::string::npos);
  }

  // Truncation at any prefix fails: sampled every few hundred bytes.
  for (std::size_t keep = 4; keep + 200 < good.size(); keep += 311) {
    spit(p, good.substr(0, keep));
    CHECK_THROWS_AS((void)load_checkpoint(p.string()), FormatError);
  }

  // A well-formed file with a future version is refused by the version gate.
  {
    std::string v2 = good;
    v2[4] = 2;
    refresh_trailer(v2);
    spit(p, v2);
    CHECK(error_text(p).find("version") != std::string::npos);
  }

  // Wrong magic with a correct checksum is still not a checkpoint.
  {
    std::string notck = good;
    notck[0] = 'X';
    refresh_trailer(notck);
    spit(p, notck);
    CHECK(error_text(p).find("magic") != std::string::npos);
  }

  fs::remove(p);
  CHECK_THROWS_AS((void)load_checkpoint(p.string()), StorageError);
}

TEST_CASE("checkpoint: architecture mismatch and stray tensors are refused") {
  Fixture fx;
  const fs::path p = temp_file("brnn_ck_mismatch.ck");

  // Config says hidden = 12 but the stored tensors were built with 6.
  {
    Checkpoint ck = checkpoint_of(fx.rc, fx.st);
    ck.config.hidden = 12;
    save_checkpoint(ck, p.string());
    CHECK(error_text(p).find("contradict") != std::string::npos);
  }

  // An extra tensor the architecture does not name is refused. The entry is
  // spliced in before the trailer: name length, name, rank 1, extent 1, one
  // float, then a refreshed checksum.
  {
    save_checkpoint(checkpoint_of(fx.rc, fx.st), p.string());
    std::string bytes = slurp(p);
    std::string entry;
    const std::string name = "mystery.blob";
    for (int i = 0; i < 8; ++i) {
      entry.push_back(static_cast<char>((name.size() >> (8 * i)) & 0xff));
    }
    entry += name;
    entry.push_back(1);
    for (int i = 0; i < 7; ++i) entry.push_back(0);
    entry.push_back(1);
    for (int i = 0; i < 7; ++i) entry.push_back(0);
    for (int i = 0; i < 4; ++i) entry.push_back(0);
    bytes.insert(bytes.size() - 8, entry);
    refresh_trailer(bytes);
    spit(p, bytes);
    CHECK(error_text(p).find("unknown tensor") != std::string::npos);
  }

  // A valid header with an empty tensor table cannot satisfy an architecture
  // that declares parameters.
  {
    save_checkpoint(checkpoint_of(fx.rc, fx.st), p.string());
    std::string bytes = slurp(p);
    // Header runs up to the end of the embedded text.
    std::size_t text_len = 0;
    for (int i = 0; i < 8; ++i) {
      text_len |= static_cast<std::size_t>(
                      static_cast<unsigned char>(bytes[8 + i]))
                  << (8 * i);
    }
    std::string empty = bytes.substr(0, 16 + text_len);
    empty.resize(empty.size() + 8);
    refresh_trailer(empty);
    spit(p, empty);
    CHECK(error_text(p).find("missing tensor") != std::string::npos);
  }

  // Unwritable target: no file appears, and no temp file is left behind.
  {
    const fs::path nowhere = fs::temp_directory_path() / "brnn_no_dir" / "x.ck";
    CHECK_THROWS_AS(save_checkpoint(checkpoint_of(fx.rc, fx.st),
                                    nowhere.string()),
                    StorageError);
    CHECK_FALSE(fs::exists(nowhere));
    CHECK_FALSE(fs::exists(nowhere.string() + ".tmp"));
  }
  fs::remove(p);
}

TEST_CASE("checkpoint: resuming reproduces the uninterrupted trajectory") {
  // Ten straight steps.
  Fixture a;
  REQUIRE(a.plan.cuts.size() >= 10);
  a.steps(0, 10);

  // Five steps, a save/load round trip, then five more.
  Fixture b;
  b.steps(0, 5);
  const fs::path p = temp_file("brnn_ck_resume.ck");
  save_checkpoint(checkpoint_of(b.rc, b.st), p.string());
  Checkpoint ck = load_checkpoint(p.string());
  TrainState resumed = state_of(ck);
  CHECK(resumed.rng.draws() == b.st.rng.draws());
  b.st = std::move(resumed);
  b.steps(5, 10);

  check_posteriors_equal(a.st.post, b.st.post);
  CHECK(a.st.step == b.st.step);
  fs::remove(p);

  // The epoch path: 4 epochs equals 2 + round trip + 2, bit for bit.
  Fixture c;
  for (int e = 0; e < 4; ++e) run_epoch(c.st, c.rc.trainer, c.plan);
  Fixture d2;
  for (int e = 0; e < 2; ++e) run_epoch(d2.st, d2.rc.trainer, d2.plan);
  save_checkpoint(checkpoint_of(d2.rc, d2.st), p.string());
  TrainState dres = state_of(load_checkpoint(p.string()));
  for (int e = 0; e < 2; ++e) run_epoch(dres, d2.rc.trainer, d2.plan);
  check_posteriors_equal(c.st.post, dres.post);
  CHECK(c.st.epoch == dres.epoch);
  CHECK(c.st.lr == dres.lr);
  fs::remove(p);
}
