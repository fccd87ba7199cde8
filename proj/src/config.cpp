#include "brnn/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "brnn/errors.hpp"

namespace brnn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-' || v[0] == '+') {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v +
                      "'");
  }
  char* end = nullptr;
  errno = 0;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end != v.c_str() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v +
                      "'");
  }
  return out;
}

double parse_f64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": expected true/false/on/off, got '" + v + "'");
}

TokenMode parse_token_mode(const std::string& key, const std::string& v) {
  if (v == "word") return TokenMode::Word;
  if (v == "char") return TokenMode::Char;
  throw ConfigError(key + ": expected word or char, got '" + v + "'");
}

EvalMode parse_eval_mode(const std::string& key, const std::string& v) {
  if (v == "map") return EvalMode::Map;
  if (v == "mc") return EvalMode::MonteCarlo;
  if (v == "sharpened") return EvalMode::Sharpened;
  throw ConfigError(key + ": expected map, mc or sharpened, got '" + v + "'");
}

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const char* token_mode_name(TokenMode m) {
  return m == TokenMode::Word ? "word" : "char";
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    }
    if (!kv.emplace(key, val).second) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

RunConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  RunConfig rc;
  for (const auto& [key, v] : kv) {
    if (key == "model.layers") {
      rc.layers = parse_u64(key, v);
    } else if (key == "model.hidden") {
      rc.hidden = parse_u64(key, v);
    } else if (key == "model.embedding") {
      rc.embedding = parse_u64(key, v);
    } else if (key == "model.vocab_mode") {
      rc.vocab_mode = parse_token_mode(key, v);
    } else if (key == "model.min_count") {
      rc.min_count = parse_u64(key, v);
    } else if (key == "trainer.unroll") {
      rc.trainer.unroll = parse_u64(key, v);
    } else if (key == "trainer.batch_size") {
      rc.trainer.batch_size = parse_u64(key, v);
    } else if (key == "trainer.groups") {
      rc.trainer.groups = parse_u64(key, v);
    } else if (key == "trainer.lr") {
      rc.trainer.learning_rate = parse_f64(key, v);
    } else if (key == "trainer.lr_decay") {
      rc.trainer.lr_decay = parse_f64(key, v);
    } else if (key == "trainer.decay_after") {
      rc.trainer.decay_after = parse_u64(key, v);
    } else if (key == "trainer.clip_norm") {
      rc.trainer.clip_norm = parse_f64(key, v);
    } else if (key == "trainer.epochs") {
      rc.epochs = parse_u64(key, v);
    } else if (key == "trainer.seed") {
      rc.trainer.seed = parse_u64(key, v);
    } else if (key == "prior.pi") {
      rc.trainer.prior.pi = parse_f64(key, v);
    } else if (key == "prior.sigma1") {
      rc.trainer.prior.sigma1 = parse_f64(key, v);
    } else if (key == "prior.sigma2") {
      rc.trainer.prior.sigma2 = parse_f64(key, v);
    } else if (key == "sharpening.enabled") {
      rc.sharpen = parse_bool(key, v);
    } else if (key == "sharpening.sigma0") {
      rc.sharpening.sigma0 = parse_f64(key, v);
    } else if (key == "sharpening.eta_init") {
      rc.sharpening.eta_init = parse_f64(key, v);
    } else if (key == "sharpening.second_order") {
      rc.sharpening.second_order = parse_bool(key, v);
    } else if (key == "sharpening.outer_kl_uses_b") {
      rc.sharpening.outer_kl_uses_b = parse_bool(key, v);
    } else if (key == "eval.mode") {
      rc.eval_mode = parse_eval_mode(key, v);
    } else if (key == "eval.samples") {
      rc.eval_samples = parse_u64(key, v);
    } else if (key == "paths.corpus") {
      rc.corpus = v;
    } else if (key == "paths.valid") {
      rc.valid = v;
    } else if (key == "paths.checkpoint") {
      rc.checkpoint = v;
    } else if (key == "paths.metrics") {
      rc.metrics = v;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  rc.validate();
  return rc;
}

void RunConfig::validate() const {
  if (layers != 1) {
    throw ConfigError("model.layers: only a single recurrent layer is "
                      "supported");
  }
  if (hidden == 0) throw ConfigError("model.hidden: must be >= 1");
  if (embedding == 0) throw ConfigError("model.embedding: must be >= 1");
  if (min_count == 0) throw ConfigError("model.min_count: must be >= 1");
  if (trainer.unroll == 0) throw ConfigError("trainer.unroll: must be >= 1");
  if (trainer.batch_size == 0) {
    throw ConfigError("trainer.batch_size: must be >= 1");
  }
  if (trainer.groups == 0) throw ConfigError("trainer.groups: must be >= 1");
  if (trainer.learning_rate <= 0.0) {
    throw ConfigError("trainer.lr: must be > 0");
  }
  if (trainer.lr_decay <= 0.0 || trainer.lr_decay > 1.0) {
    throw ConfigError("trainer.lr_decay: must be in (0, 1]");
  }
  if (trainer.prior.pi <= 0.0 || trainer.prior.pi > 1.0) {
    throw ConfigError("prior.pi: must be in (0, 1]");
  }
  if (trainer.prior.sigma1 <= 0.0) throw ConfigError("prior.sigma1: must be > 0");
  if (trainer.prior.sigma2 <= 0.0) throw ConfigError("prior.sigma2: must be > 0");
  if (sharpening.sigma0 <= 0.0) {
    throw ConfigError("sharpening.sigma0: must be > 0");
  }
  if (!std::isfinite(sharpening.eta_init)) {
    throw ConfigError("sharpening.eta_init: must be finite");
  }
  if (eval_samples == 0) throw ConfigError("eval.samples: must be >= 1");
}

RunConfig parse_config_text(const std::string& text) {
  return config_from_kv(parse_kv_text(text));
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string canonical_config(const RunConfig& rc) {
  std::ostringstream out;
  out << "model.layers = " << rc.layers << '\n';
  out << "model.hidden = " << rc.hidden << '\n';
  out << "model.embedding = " << rc.embedding << '\n';
  out << "model.vocab_mode = " << token_mode_name(rc.vocab_mode) << '\n';
  out << "model.min_count = " << rc.min_count << '\n';
  out << "trainer.unroll = " << rc.trainer.unroll << '\n';
  out << "trainer.batch_size = " << rc.trainer.batch_size << '\n';
  out << "trainer.groups = " << rc.trainer.groups << '\n';
  out << "trainer.lr = " << fmt_f64(rc.trainer.learning_rate) << '\n';
  out << "trainer.lr_decay = " << fmt_f64(rc.trainer.lr_decay) << '\n';
  out << "trainer.decay_after = " << rc.trainer.decay_after << '\n';
  out << "trainer.clip_norm = " << fmt_f64(rc.trainer.clip_norm) << '\n';
  out << "trainer.epochs = " << rc.epochs << '\n';
  out << "trainer.seed = " << rc.trainer.seed << '\n';
  out << "prior.pi = " << fmt_f64(rc.trainer.prior.pi) << '\n';
  out << "prior.sigma1 = " << fmt_f64(rc.trainer.prior.sigma1) << '\n';
  out << "prior.sigma2 = " << fmt_f64(rc.trainer.prior.sigma2) << '\n';
  out << "sharpening.enabled = " << (rc.sharpen ? "true" : "false") << '\n';
  out << "sharpening.sigma0 = " << fmt_f64(rc.sharpening.sigma0) << '\n';
  out << "sharpening.eta_init = " << fmt_f64(rc.sharpening.eta_init) << '\n';
  out << "sharpening.second_order = "
      << (rc.sharpening.second_order ? "true" : "false") << '\n';
  out << "sharpening.outer_kl_uses_b = "
      << (rc.sharpening.outer_kl_uses_b ? "true" : "false") << '\n';
  out << "eval.mode = " << eval_mode_name(rc.eval_mode) << '\n';
  out << "eval.samples = " << rc.eval_samples << '\n';
  out << "paths.corpus = " << rc.corpus << '\n';
  out << "paths.valid = " << rc.valid << '\n';
  out << "paths.checkpoint = " << rc.checkpoint << '\n';
  out << "paths.metrics = " << rc.metrics << '\n';
  return out.str();
}

void apply_env_overrides(RunConfig& rc) {
  if (const char* s = std::getenv("BRNN_SEED")) {
    rc.trainer.seed = parse_u64("BRNN_SEED", s);
  }
}

}  // namespace brnn
