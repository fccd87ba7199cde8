#include "brnn/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "brnn/errors.hpp"

namespace brnn {

namespace {

constexpr char kMagic[4] = {'B', 'R', 'N', 'N'};

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& b, float f) {
  put_u32(b, std::bit_cast<std::uint32_t>(f));
}

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

struct Reader {
  const char* p;
  std::size_t n;
  std::size_t off = 0;

  void need(std::size_t k) const {
    if (off + k > n) throw FormatError("truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[off + i]))
           << (8 * i);
    }
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[off + i]))
           << (8 * i);
    }
    off += 8;
    return v;
  }
  std::string bytes(std::size_t k) {
    need(k);
    std::string s(p + off, k);
    off += k;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
};

void put_tensor(std::string& buf, const std::string& name, const Tensor& t) {
  put_u64(buf, name.size());
  buf.append(name);
  put_u64(buf, t.rank());
  for (std::size_t e : t.shape()) put_u64(buf, e);
  for (float v : t.values()) put_f32(buf, v);
}

std::uint64_t read_state_u64(std::map<std::string, std::string>& kv,
                             const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("checkpoint text misses " + key);
  char* end = nullptr;
  const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
  if (end != it->second.c_str() + it->second.size()) {
    throw FormatError("checkpoint text: bad value for " + key);
  }
  kv.erase(it);
  return v;
}

double read_state_f64(std::map<std::string, std::string>& kv,
                      const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("checkpoint text misses " + key);
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (end != it->second.c_str() + it->second.size()) {
    throw FormatError("checkpoint text: bad value for " + key);
  }
  kv.erase(it);
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kCheckpointVersion);

  std::string text = canonical_config(ck.config);
  text += "state.seed = " + std::to_string(ck.rng_seed) + "\n";
  text += "state.draws = " + std::to_string(ck.rng_draws) + "\n";
  text += "state.epoch = " + std::to_string(ck.epoch) + "\n";
  text += "state.step = " + std::to_string(ck.step) + "\n";
  char lrbuf[64];
  std::snprintf(lrbuf, sizeof lrbuf, "%.17g", ck.lr);
  text += std::string("state.lr = ") + lrbuf + "\n";
  put_u64(buf, text.size());
  buf.append(text);

  for (const auto& [name, q] : ck.post.params) {
    put_tensor(buf, name + ".mu", q.mu);
    put_tensor(buf, name + ".rho", q.rho);
  }
  if (ck.eta) {
    for (const auto& [name, t] : *ck.eta) put_tensor(buf, name + ".eta", t);
  }
  if (ck.carry.h.defined() && ck.carry.c.defined()) {
    put_tensor(buf, "carry.h", ck.carry.h);
    put_tensor(buf, "carry.c", ck.carry.c);
  }

  put_u64(buf, fnv1a(buf.data(), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open " + tmp + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw StorageError("write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw StorageError("cannot move " + tmp + " into place at " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string buf;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StorageError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    buf = ss.str();
  }
  if (buf.size() < 4 + 4 + 8 + 8) throw FormatError("truncated checkpoint");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t stored = Reader{buf.data() + buf.size() - 8, 8}.u64();
  if (stored != fnv1a(buf.data(), buf.size() - 8)) {
    throw FormatError("checkpoint checksum mismatch");
  }

  Reader r{buf.data(), buf.size() - 8};
  r.off = 4;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }

  const std::uint64_t text_len = r.u64();
  const std::string text = r.bytes(text_len);
  auto kv = parse_kv_text(text);

  Checkpoint ck;
  ck.rng_seed = read_state_u64(kv, "state.seed");
  ck.rng_draws = read_state_u64(kv, "state.draws");
  ck.epoch = read_state_u64(kv, "state.epoch");
  ck.step = read_state_u64(kv, "state.step");
  ck.lr = read_state_f64(kv, "state.lr");
  try {
    ck.config = config_from_kv(kv);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }

  // Raw table first; names are validated against the architecture below.
  std::map<std::string, Tensor> table;
  while (r.off < r.n) {
    const std::uint64_t name_len = r.u64();
    const std::string name = r.bytes(name_len);
    const std::uint64_t rank = r.u64();
    if (rank > 4) throw FormatError("tensor " + name + ": absurd rank");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& e : shape) {
      const std::uint64_t ext = r.u64();
      if (ext == 0 || ext > (1u << 28)) {
        throw FormatError("tensor " + name + ": absurd extent");
      }
      e = ext;
      count *= e;
    }
    std::vector<float> vals(count);
    for (auto& v : vals) v = r.f32();
    if (!table.emplace(name, Tensor::from(std::move(shape), std::move(vals)))
             .second) {
      throw FormatError("duplicate tensor " + name);
    }
  }

  auto take = [&table](const std::string& name) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("missing tensor " + name);
    Tensor t = it->second;
    table.erase(it);
    return t;
  };

  // The vocabulary size lives only in the stored extents.
  {
    auto it = table.find("embedding.table.mu");
    if (it == table.end()) throw FormatError("missing tensor embedding.table.mu");
    if (it->second.rank() != 2) {
      throw FormatError("embedding.table.mu: expected a matrix");
    }
    ck.post.dims = LstmDims{it->second.shape()[0], ck.config.embedding,
                            ck.config.hidden};
  }

  const auto layout = param_layout(ck.post.dims);
  bool has_eta = table.count(layout.front().first + ".eta") > 0;
  ParamMap eta;
  for (const auto& [name, shape] : layout) {
    Tensor mu = take(name + ".mu");
    Tensor rho = take(name + ".rho");
    if (mu.shape() != shape || rho.shape() != shape) {
      throw FormatError("tensor " + name +
                        ": extents contradict the stored architecture (" +
                        shape_str(mu.shape()) + " vs " + shape_str(shape) +
                        ")");
    }
    mu.set_requires_grad(true);
    rho.set_requires_grad(true);
    ck.post.params.emplace(name, GaussianVariational{mu, rho});
    if (has_eta) {
      Tensor e = take(name + ".eta");
      if (e.shape() != shape) {
        throw FormatError("tensor " + name + ".eta: extents contradict the "
                          "stored architecture");
      }
      e.set_requires_grad(true);
      eta.emplace(name, e);
    }
  }
  if (has_eta) ck.eta = std::move(eta);

  if (table.count("carry.h") || table.count("carry.c")) {
    if (!table.count("carry.h") || !table.count("carry.c")) {
      throw FormatError("carried state needs both carry.h and carry.c");
    }
    Tensor h = take("carry.h");
    Tensor c = take("carry.c");
    if (h.rank() != 2 || c.rank() != 2 || h.shape() != c.shape() ||
        h.shape()[1] != ck.post.dims.hidden) {
      throw FormatError("carried state extents contradict the architecture");
    }
    ck.carry = LstmState{h, c};
  }

  if (!table.empty()) {
    throw FormatError("unknown tensor " + table.begin()->first);
  }
  return ck;
}

Checkpoint checkpoint_of(const RunConfig& rc, const TrainState& st,
                         const ParamMap* eta) {
  Checkpoint ck;
  ck.config = rc;
  ck.post = st.post;
  if (eta) ck.eta = *eta;
  ck.carry = st.carry;
  ck.rng_seed = st.rng.seed();
  ck.rng_draws = st.rng.draws();
  ck.epoch = st.epoch;
  ck.step = st.step;
  ck.lr = st.lr;
  return ck;
}

TrainState state_of(const Checkpoint& ck) {
  TrainState st;
  st.post = ck.post;
  st.rng = Rng::restore(ck.rng_seed, ck.rng_draws);
  st.lr = ck.lr;
  st.epoch = ck.epoch;
  st.step = ck.step;
  st.carry = ck.carry;
  return st;
}

}  // namespace brnn
