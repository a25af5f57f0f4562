// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "hybridkit/halo.hpp"
#include "json.hpp"

namespace hybridkit {

using Json = nlohmann::ordered_json;

/// Strict reader over one JSON object: every key must be consumed, and every
/// value must have the expected type. Errors name the full key path.
class JsonReader {
 public:
  JsonReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class V>
  void get(const std::string& key, V& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    out = convert<V>(j_.at(key), child(key));
  }

  const Json* object(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    if (!j_.at(key).is_object()) throw ConfigError(child(key) + ": expected an object");
    return &j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + child(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  template <class V>
  static V convert(const Json& v, const std::string& path) {
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a nonnegative integer");
      return v.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<V>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    } else {
      // std::vector of one of the above
      if (!v.is_array()) throw ConfigError(path + ": expected a list");
      V out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename V::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// ------------------------------------------------------------ enum names

inline PosEncoding parse_pe(const std::string& s, const std::string& path) {
  if (s == "rope") return PosEncoding::RoPE;
  if (s == "nope") return PosEncoding::NoPE;
  throw ConfigError(path + ": expected \"rope\" or \"nope\", got \"" + s + "\"");
}
inline std::string pe_name(PosEncoding p) { return p == PosEncoding::RoPE ? "rope" : "nope"; }

inline MixerKind parse_rnn_kind(const std::string& s, const std::string& path) {
  if (s == "lightning") return MixerKind::Lightning;
  if (s == "diag") return MixerKind::DiagRNN;
  throw ConfigError(path + ": expected \"lightning\" or \"diag\", got \"" + s + "\"");
}
inline std::string rnn_kind_name(MixerKind k) { return k == MixerKind::DiagRNN ? "diag" : "lightning"; }

inline Schedule parse_schedule(const std::string& s, const std::string& path) {
  if (s == "cosine") return Schedule::Cosine;
  if (s == "constant") return Schedule::Constant;
  throw ConfigError(path + ": expected \"cosine\" or \"constant\", got \"" + s + "\"");
}

inline Json scaling_to_json(const LogitsScaling& s) {
  switch (s.kind) {
    case LogitsScaling::Kind::None:
      return Json{{"kind", "none"}};
    case LogitsScaling::Kind::LogBase:
      return Json{{"kind", "log_base"}, {"value", s.value}};
    case LogitsScaling::Kind::Constant:
      return Json{{"kind", "constant"}, {"value", s.value}};
  }
  return {};
}

inline LogitsScaling scaling_from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  std::string kind = "none";
  double value = 0;
  r.get("kind", kind);
  const bool has_value = r.has("value");
  r.get("value", value);
  r.finish();
  if (kind == "none") return LogitsScaling::none();
  if (!has_value) throw ConfigError(path + ".value: required for kind \"" + kind + "\"");
  if (kind == "log_base") return LogitsScaling::log_base(value);
  if (kind == "constant") return LogitsScaling::constant(value);
  throw ConfigError(path + ".kind: expected \"none\", \"log_base\" or \"constant\", got \"" + kind + "\"");
}

// ----------------------------------------------------------- model config

inline Json model_config_to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers},
              {"attn_layers", c.attn_layers},
              {"d", c.d},
              {"head_dim", c.head_dim},
              {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads},
              {"ffn", c.ffn},
              {"vocab", c.vocab},
              {"rope_theta", c.rope.theta},
              {"scaling", scaling_to_json(c.scaling)},
              {"attn_pe", pe_name(c.attn_pe)},
              {"rnn_pe", pe_name(c.rnn_pe)},
              {"rnn_kind", rnn_kind_name(c.rnn_kind)},
              {"qk_norm", c.qk_norm},
              {"attn_gate", c.attn_gate},
              {"rnn_gate", c.rnn_gate},
              {"tie_embeddings", c.tie_embeddings},
              {"chunk", c.chunk},
              {"norm_eps", c.norm_eps},
              {"init_std", c.init_std}};
}

/// "arch" picks the preset (hypenet or transformer); other keys override it.
/// Without attn_layers, the preset's pattern is rebuilt for n_layers.
inline ModelConfig model_config_from_json(const Json& j, const std::string& path = "model") {
  JsonReader r(j, path);
  std::string arch = "hypenet";
  r.get("arch", arch);
  std::size_t L = 8;
  r.get("n_layers", L);
  ModelConfig c;
  if (arch == "hypenet")
    c = ModelConfig::hypenet(L);
  else if (arch == "transformer")
    c = ModelConfig::transformer(L);
  else
    throw ConfigError(r.child("arch") + ": expected \"hypenet\" or \"transformer\", got \"" + arch + "\"");
  r.get("attn_layers", c.attn_layers);
  r.get("d", c.d);
  r.get("head_dim", c.head_dim);
  r.get("n_heads", c.n_heads);
  r.get("n_kv_heads", c.n_kv_heads);
  r.get("ffn", c.ffn);
  r.get("vocab", c.vocab);
  r.get("rope_theta", c.rope.theta);
  c.rope.head_dim = c.head_dim;
  if (const Json* s = r.object("scaling")) c.scaling = scaling_from_json(*s, r.child("scaling"));
  std::string s;
  if (r.has("attn_pe")) r.get("attn_pe", s), c.attn_pe = parse_pe(s, r.child("attn_pe"));
  if (r.has("rnn_pe")) r.get("rnn_pe", s), c.rnn_pe = parse_pe(s, r.child("rnn_pe"));
  if (r.has("rnn_kind")) r.get("rnn_kind", s), c.rnn_kind = parse_rnn_kind(s, r.child("rnn_kind"));
  r.get("qk_norm", c.qk_norm);
  r.get("attn_gate", c.attn_gate);
  r.get("rnn_gate", c.rnn_gate);
  r.get("tie_embeddings", c.tie_embeddings);
  r.get("chunk", c.chunk);
  r.get("norm_eps", c.norm_eps);
  r.get("init_std", c.init_std);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

// ----------------------------------------------------------- train config

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"steps", c.steps},         {"tokens_budget", c.tokens_budget}, {"batch_size", c.batch_size},
              {"context_len", c.context_len}, {"lr_max", c.lr_max},         {"lr_min", c.lr_min},
              {"schedule", to_string(c.schedule)}, {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1},
              {"beta2", c.beta2},         {"eps", c.eps},                     {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip}, {"seed", c.seed}};
}

inline void read_train_keys(JsonReader& r, TrainConfig& c) {
  r.get("steps", c.steps);
  r.get("tokens_budget", c.tokens_budget);
  r.get("batch_size", c.batch_size);
  r.get("context_len", c.context_len);
  r.get("lr_max", c.lr_max);
  r.get("lr_min", c.lr_min);
  if (r.has("schedule")) {
    std::string s;
    r.get("schedule", s);
    c.schedule = parse_schedule(s, r.child("schedule"));
  }
  r.get("warmup_steps", c.warmup_steps);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("seed", c.seed);
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& path, TrainConfig c = {}) {
  JsonReader r(j, path);
  read_train_keys(r, c);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

// -------------------------------------------------------------- run config

struct EvalConfig {
  std::vector<std::size_t> lengths{256, 512, 1024};
  std::size_t niah_samples = 200;
  std::uint64_t niah_seed = 7;
  std::size_t csr_samples = 200;
  std::uint64_t csr_seed = 11;
  std::size_t r_length_factor = 2;  // R is scored at this multiple of the training context
  std::vector<double> scale_candidates = default_scale_candidates();
  std::size_t fit_docs = 8;         // held-out documents for the scale-base fit
  std::size_t fit_length_factor = 4;
  std::size_t ppl_docs = 16;
  std::size_t ppl_length = 0;  // 0: the training context
};

struct RunConfig {
  ModelConfig model = ModelConfig::hypenet();
  TrainConfig train{.context_len = 256, .batch_size = 8, .steps = 100, .lr_max = 1e-3, .lr_min = 1e-5,
                    .warmup_steps = 10};
  CorpusSpec corpus;
  HaloConfig halo;
  EvalConfig eval;

  /// Eval suites implied by the config (R length, sample counts, seeds).
  RCEvalSpec rc_spec(std::size_t threads) const {
    RCEvalSpec s;
    s.niah.context_len = eval.r_length_factor * halo.stage1.context_len;
    s.niah.n_samples = eval.niah_samples;
    s.niah.seed = eval.niah_seed;
    s.niah.key_len = corpus.key_len;
    s.niah.value_len = corpus.value_len;
    s.niah.separator = corpus.separator;
    s.niah.vocab = model.vocab;
    s.niah.grammar_seed = corpus.grammar_seed;
    s.csr.n_samples = eval.csr_samples;
    s.csr.seed = eval.csr_seed;
    s.csr.grammar_seed = corpus.grammar_seed;
    s.threads = threads;
    return s;
  }
};

inline Json corpus_to_json(const CorpusSpec& c) {
  return Json{{"niah_fraction", c.niah_fraction}, {"needles", c.needles},   {"key_len", c.key_len},
              {"value_len", c.value_len},         {"separator", c.separator},
              {"grammar_seed", c.grammar_seed}};
}

inline Json run_config_to_json(const RunConfig& rc) {
  Json train = train_config_to_json(rc.train);
  train["corpus"] = corpus_to_json(rc.corpus);
  train["stage1"] = train_config_to_json(rc.halo.stage1);
  train["stage2"] = train_config_to_json(rc.halo.stage2);
  train["stage3"] = train_config_to_json(rc.halo.stage3);
  train["select_k"] = rc.halo.k;
  train["halo_rnn_kind"] = rnn_kind_name(rc.halo.rnn_kind);
  const auto& e = rc.eval;
  return Json{{"model", model_config_to_json(rc.model)},
              {"train", train},
              {"eval",
               {{"lengths", e.lengths},
                {"niah_samples", e.niah_samples},
                {"niah_seed", e.niah_seed},
                {"csr_samples", e.csr_samples},
                {"csr_seed", e.csr_seed},
                {"r_length_factor", e.r_length_factor},
                {"scale_candidates", e.scale_candidates},
                {"fit_docs", e.fit_docs},
                {"fit_length_factor", e.fit_length_factor},
                {"ppl_docs", e.ppl_docs},
                {"ppl_length", e.ppl_length}}}};
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig rc;
  JsonReader root(j, "");
  if (const Json* m = root.object("model")) rc.model = model_config_from_json(*m);
  if (const Json* t = root.object("train")) {
    JsonReader r(*t, "train");
    read_train_keys(r, rc.train);
    if (const Json* c = r.object("corpus")) {
      JsonReader cr(*c, "train.corpus");
      cr.get("niah_fraction", rc.corpus.niah_fraction);
      cr.get("needles", rc.corpus.needles);
      cr.get("key_len", rc.corpus.key_len);
      cr.get("value_len", rc.corpus.value_len);
      cr.get("separator", rc.corpus.separator);
      cr.get("grammar_seed", rc.corpus.grammar_seed);
      cr.finish();
    }
    if (const Json* s = r.object("stage1")) rc.halo.stage1 = train_config_from_json(*s, "train.stage1", rc.halo.stage1);
    if (const Json* s = r.object("stage2")) rc.halo.stage2 = train_config_from_json(*s, "train.stage2", rc.halo.stage2);
    if (const Json* s = r.object("stage3")) rc.halo.stage3 = train_config_from_json(*s, "train.stage3", rc.halo.stage3);
    r.get("select_k", rc.halo.k);
    if (r.has("halo_rnn_kind")) {
      std::string s;
      r.get("halo_rnn_kind", s);
      rc.halo.rnn_kind = parse_rnn_kind(s, "train.halo_rnn_kind");
    }
    r.finish();
  }
  if (const Json* e = root.object("eval")) {
    JsonReader r(*e, "eval");
    auto& ev = rc.eval;
    r.get("lengths", ev.lengths);
    r.get("niah_samples", ev.niah_samples);
    r.get("niah_seed", ev.niah_seed);
    r.get("csr_samples", ev.csr_samples);
    r.get("csr_seed", ev.csr_seed);
    r.get("r_length_factor", ev.r_length_factor);
    r.get("scale_candidates", ev.scale_candidates);
    r.get("fit_docs", ev.fit_docs);
    r.get("fit_length_factor", ev.fit_length_factor);
    r.get("ppl_docs", ev.ppl_docs);
    r.get("ppl_length", ev.ppl_length);
    r.finish();
  }
  root.finish();
  rc.corpus.vocab = rc.model.vocab;
  try {
    rc.train.validate();
    rc.corpus.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (rc.eval.r_length_factor == 0) throw ConfigError("eval.r_length_factor must be >= 1");
  for (double a : rc.eval.scale_candidates)
    if (!(a > 1)) throw ConfigError("eval.scale_candidates: every base must exceed 1");
  return rc;
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(parse_json_text(ss.str(), path));
}

}  // namespace hybridkit
