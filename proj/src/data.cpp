#include "brnn/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <utility>

namespace brnn {

std::vector<std::string> Vocab::tokenize(std::string_view text,
                                         TokenMode mode) {
  std::vector<std::string> out;
  if (mode == TokenMode::Char) {
    out.reserve(text.size());
    for (char ch : text) out.emplace_back(1, ch);
    return out;
  }
  std::string cur;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      if (!cur.empty()) out.push_back(std::exchange(cur, {}));
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab Vocab::build(std::string_view text, TokenMode mode,
                   std::size_t min_count) {
  auto toks = tokenize(text, mode);
  if (toks.empty()) throw DataError("build_vocab: no tokens in text");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : toks) ++counts[t];

  std::vector<std::pair<std::string, std::size_t>> kept;
  bool dropped = false;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count) {
      kept.emplace_back(tok, n);
    } else {
      dropped = true;
    }
  }
  if (kept.empty()) throw DataError("build_vocab: min_count drops every token");
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.mode_ = mode;
  for (auto& [tok, n] : kept) {
    v.ids_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
    v.tokens_.push_back(tok);
  }
  auto unk_it = v.ids_.find("<unk>");
  if (unk_it != v.ids_.end()) {
    v.unk_ = unk_it->second;
  } else if (dropped) {
    v.unk_ = static_cast<std::int32_t>(v.tokens_.size());
    v.ids_.emplace("<unk>", v.unk_);
    v.tokens_.emplace_back("<unk>");
  }
  return v;
}

std::int32_t Vocab::unk_id() const {
  if (unk_ < 0) throw VocabError("vocab has no unk token");
  return unk_;
}

std::int32_t Vocab::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  if (unk_ >= 0) return unk_;
  throw VocabError("unknown token '" + token + "' and no unk in vocab");
}

const std::string& Vocab::token_of(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::vector<std::int32_t> out;
  for (const auto& tok : tokenize(text, mode_)) out.push_back(id_of(tok));
  return out;
}

std::string Vocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ == TokenMode::Word && i > 0) out.push_back(' ');
    out += token_of(ids[i]);
  }
  return out;
}

namespace {

std::string escape_token(const std::string& t) {
  std::string out;
  for (char ch : t) {
    if (ch == '\\') {
      out += "\\\\";
    } else if (ch == '\n') {
      out += "\\n";
    } else if (ch == '\r') {
      out += "\\r";
    } else {
      out.push_back(ch);
    }
  }
  return out;
}

std::string unescape_token(const std::string& t) {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == '\\' && i + 1 < t.size()) {
      const char next = t[++i];
      if (next == 'n') {
        out.push_back('\n');
      } else if (next == 'r') {
        out.push_back('\r');
      } else {
        out.push_back(next);
      }
    } else {
      out.push_back(t[i]);
    }
  }
  return out;
}

}  // namespace

void Vocab::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write vocab file " + path);
  for (const auto& tok : tokens_) f << escape_token(tok) << '\n';
  if (!f) throw DataError("failed writing vocab file " + path);
}

Vocab Vocab::load(const std::string& path, TokenMode mode) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read vocab file " + path);
  Vocab v;
  v.mode_ = mode;
  std::string line;
  while (std::getline(f, line)) {
    std::string tok = unescape_token(line);
    if (v.ids_.count(tok)) {
      throw FormatError("duplicate token in vocab file " + path);
    }
    v.ids_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
    v.tokens_.push_back(std::move(tok));
  }
  if (v.tokens_.empty()) throw DataError("empty vocab file " + path);
  auto it = v.ids_.find("<unk>");
  if (it != v.ids_.end()) v.unk_ = it->second;
  return v;
}

CutPlan make_cuts(std::span<const std::int32_t> ids, std::size_t n,
                  std::size_t T, std::size_t groups) {
  if (n == 0 || T == 0 || groups == 0) {
    throw ContractError("make_cuts: n, T, groups must be positive");
  }
  const std::size_t seg_len = ids.size() / groups;
  const std::size_t stream_len = seg_len / n;
  if (stream_len < T + 1) {
    throw DataError("make_cuts: corpus too short: need at least " +
                    std::to_string(groups * n * (T + 1)) + " tokens, got " +
                    std::to_string(ids.size()));
  }
  const std::size_t c_count = (stream_len - 1) / T;

  CutPlan plan;
  plan.b_count = groups;
  plan.c_count = c_count;
  plan.batch = n;
  plan.steps = T;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::int32_t* seg = ids.data() + g * seg_len;
    for (std::size_t c = 0; c < c_count; ++c) {
      CutBatch cb;
      cb.batch = n;
      cb.steps = T;
      cb.b = g;
      cb.c = c;
      cb.carried = c > 0;
      cb.x.resize(n * T);
      cb.y.resize(n * T);
      for (std::size_t s = 0; s < n; ++s) {
        const std::int32_t* stream = seg + s * stream_len;
        for (std::size_t t = 0; t < T; ++t) {
          cb.x[s * T + t] = stream[c * T + t];
          cb.y[s * T + t] = stream[c * T + t + 1];
        }
      }
      plan.cuts.push_back(std::move(cb));
    }
  }
  return plan;
}

std::vector<std::int32_t> reverse_corpus(std::span<const std::int32_t> ids) {
  return {ids.rbegin(), ids.rend()};
}

std::string generate_grammar_text(std::size_t sentences, Rng& rng) {
  static const char* adj[] = {"red", "blue", "green", "old", "new", "tall"};
  static const char* noun[] = {"cat", "dog", "bird", "horse", "fish", "mouse"};
  static const char* verb[] = {"chases", "finds",   "sees",
                               "follows", "likes", "avoids"};
  static const char* obj[] = {"ball", "stick", "house", "tree", "door", "road"};
  std::string out;
  for (std::size_t s = 0; s < sentences; ++s) {
    const std::size_t i = rng.integer(6);
    const std::size_t j = rng.integer(6);
    out += "the ";
    out += adj[i];
    out += ' ';
    out += noun[i];
    out += ' ';
    out += verb[i];
    out += " a ";
    out += adj[j];
    out += ' ';
    out += obj[j];
    out += " .\n";
  }
  return out;
}

std::string load_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_text_file(const std::string& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write file " + path);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw DataError("failed writing file " + path);
}

}  // namespace brnn
