// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hybridkit/mixers.hpp"

namespace hybridkit {

/// Layer stack description. Attention layers are listed in attn_layers; every
/// other layer is an RNN mixer of rnn_kind.
struct ModelConfig {
  std::size_t n_layers = 8;
  std::vector<std::size_t> attn_layers{0, 4};
  std::size_t d = 256;
  std::size_t head_dim = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t ffn = 768;
  std::size_t vocab = 512;
  RopeParams rope{50000.0, 64};
  LogitsScaling scaling;  // inference-time attention logits scaling
  PosEncoding attn_pe = PosEncoding::NoPE;
  PosEncoding rnn_pe = PosEncoding::RoPE;
  MixerKind rnn_kind = MixerKind::Lightning;
  bool qk_norm = true;
  bool attn_gate = true;
  bool rnn_gate = true;
  bool tie_embeddings = true;
  std::size_t chunk = 64;
  double norm_eps = 1e-6;
  double init_std = 0.02;

  bool is_attention(std::size_t l) const {
    return std::binary_search(attn_layers.begin(), attn_layers.end(), l);
  }
  std::size_t n_attention() const { return attn_layers.size(); }

  void validate() const {
    if (d == 0 || head_dim == 0 || n_heads == 0 || vocab == 0 || ffn == 0)
      throw ConfigError("model dimensions must be positive");
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0)
      throw ConfigError("n_heads " + std::to_string(n_heads) + " is not a multiple of n_kv_heads " +
                        std::to_string(n_kv_heads));
    if (!std::is_sorted(attn_layers.begin(), attn_layers.end()) ||
        std::adjacent_find(attn_layers.begin(), attn_layers.end()) != attn_layers.end())
      throw ConfigError("attention layer indices must be sorted and unique");
    for (std::size_t l : attn_layers)
      if (l >= n_layers)
        throw ConfigError("attention layer index " + std::to_string(l) + " out of range for " +
                          std::to_string(n_layers) + " layers");
    if (rope.head_dim != head_dim) throw ConfigError("rope.head_dim must equal head_dim");
    rope.validate();
    if (chunk == 0) throw ConfigError("chunk must be >= 1");
    if (n_attention() < n_layers && rnn_kind == MixerKind::Attention)
      throw ConfigError("rnn_kind cannot be attention");
  }

  MixerConfig mixer_config(std::size_t l) const {
    MixerConfig m;
    m.d = d;
    m.n_heads = n_heads;
    m.head_dim = head_dim;
    m.qk_norm = qk_norm;
    m.rope = rope;
    m.norm_eps = norm_eps;
    if (is_attention(l)) {
      m.n_kv_heads = n_kv_heads;
      m.output_gate = attn_gate;
      m.pe = attn_pe;
    } else {
      m.n_kv_heads = n_heads;
      m.output_gate = rnn_gate;
      m.pe = rnn_pe;
    }
    return m;
  }

  MixerKind kind(std::size_t l) const { return is_attention(l) ? MixerKind::Attention : rnn_kind; }

  /// Every layer's mixer kind, e.g. "ALLLALLL".
  std::string pattern() const {
    std::string s;
    for (std::size_t l = 0; l < n_layers; ++l)
      s += is_attention(l) ? 'A' : (rnn_kind == MixerKind::Lightning ? 'L' : 'D');
    return s;
  }

  /// Desk-scale HypeNet: one attention layer per four (Attn→RNN→RNN→RNN).
  static ModelConfig hypenet(std::size_t L = 8) {
    ModelConfig c;
    c.n_layers = L;
    c.attn_layers.clear();
    for (std::size_t l = 0; l < L; l += 4) c.attn_layers.push_back(l);
    return c;
  }

  /// Attention-only Transformer with RoPE and no output gate (the teacher layout).
  static ModelConfig transformer(std::size_t L = 8) {
    ModelConfig c;
    c.n_layers = L;
    c.attn_layers.clear();
    for (std::size_t l = 0; l < L; ++l) c.attn_layers.push_back(l);
    c.attn_pe = PosEncoding::RoPE;
    c.attn_gate = false;
    return c;
  }

  bool is_transformer() const { return n_attention() == n_layers; }
};

template <class T>
struct LayerWeights {
  MixerKind kind = MixerKind::Attention;
  MixerWeights<T> mixer;
  Var<T> pre_mixer_gain, pre_mlp_gain;
  Var<T> w_gate, w_up, w_down;  // [d, ffn], [d, ffn], [ffn, d]

  std::vector<std::pair<std::string, Var<T>>> named() const {
    std::vector<std::pair<std::string, Var<T>>> out{
        {"pre_mixer_gain", pre_mixer_gain}, {"pre_mlp_gain", pre_mlp_gain}, {"mlp.gate", w_gate},
        {"mlp.up", w_up},                   {"mlp.down", w_down}};
    for (auto& [n, v] : mixer.named()) out.emplace_back("mixer." + n, v);
    return out;
  }

  LayerWeights deep_copy() const {
    LayerWeights c = *this;
    c.mixer = mixer.deep_copy();
    c.pre_mixer_gain = pre_mixer_gain.detached_copy();
    c.pre_mlp_gain = pre_mlp_gain.detached_copy();
    c.w_gate = w_gate.detached_copy();
    c.w_up = w_up.detached_copy();
    c.w_down = w_down.detached_copy();
    return c;
  }
};

template <class T>
class Model {
 public:
  Model() = default;

  /// Fresh random model: projections ~ N(0, init_std), norm gains 1.
  static Model random(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.embed_ = Var<T>::parameter(randn<T>({cfg.vocab, cfg.d}, rng, cfg.init_std));
    if (!cfg.tie_embeddings)
      m.unembed_ = Var<T>::parameter(randn<T>({cfg.vocab, cfg.d}, rng, cfg.init_std));
    m.final_gain_ = Var<T>::parameter(Tensor<T>::ones({cfg.d}));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) m.layers_.push_back(m.fresh_layer(l, rng));
    m.refresh();
    return m;
  }

  LayerWeights<T> fresh_layer(std::size_t l, Rng& rng) const {
    const ModelConfig& c = cfg_;
    LayerWeights<T> lw;
    lw.kind = c.kind(l);
    lw.mixer = init_mixer_weights<T>(c.mixer_config(l), lw.kind, rng, c.init_std);
    lw.pre_mixer_gain = Var<T>::parameter(Tensor<T>::ones({c.d}));
    lw.pre_mlp_gain = Var<T>::parameter(Tensor<T>::ones({c.d}));
    lw.w_gate = Var<T>::parameter(randn<T>({c.d, c.ffn}, rng, c.init_std));
    lw.w_up = Var<T>::parameter(randn<T>({c.d, c.ffn}, rng, c.init_std));
    lw.w_down = Var<T>::parameter(randn<T>({c.ffn, c.d}, rng, c.init_std));
    return lw;
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const Var<T>& embedding() const { return embed_; }
  const Var<T>& unembedding() const { return cfg_.tie_embeddings ? embed_ : unembed_; }
  const Var<T>& final_gain() const { return final_gain_; }
  const std::vector<LayerWeights<T>>& layers() const { return layers_; }
  std::vector<LayerWeights<T>>& mutable_layers() { return layers_; }
  const LayerWeights<T>& layer(std::size_t l) const { return layers_.at(l); }
  const GammaVector& gammas() const { return gammas_; }

  void set_embedding(Var<T> e) { embed_ = std::move(e); }
  void set_unembedding(Var<T> e) { unembed_ = std::move(e); }
  void set_final_gain(Var<T> g) { final_gain_ = std::move(g); }
  void set_layers(std::vector<LayerWeights<T>> ls) { layers_ = std::move(ls); }
  void set_config(const ModelConfig& c) {
    ModelConfig prev = std::move(cfg_);
    cfg_ = c;
    try {
      refresh();
    } catch (...) {
      cfg_ = std::move(prev);
      throw;
    }
  }

  /// Recomputes derived state and checks layers against the config.
  void refresh() {
    cfg_.validate();
    gammas_ = gamma_slopes(cfg_.n_heads);
    if (layers_.size() != cfg_.n_layers)
      throw ConfigError("model has " + std::to_string(layers_.size()) + " layers, config says " +
                        std::to_string(cfg_.n_layers));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].kind != cfg_.kind(l))
        throw ConfigError("layer " + std::to_string(l) + " is " + to_string(layers_[l].kind) +
                          " but the config expects " + to_string(cfg_.kind(l)));
      check_mixer_shapes(layers_[l].mixer, cfg_.mixer_config(l));
    }
  }

  /// Shallow copy with layer l replaced (weights are shared, not copied).
  Model with_layer(std::size_t l, LayerWeights<T> lw) const {
    Model m = *this;
    std::set<std::size_t> attn(cfg_.attn_layers.begin(), cfg_.attn_layers.end());
    if (lw.kind == MixerKind::Attention)
      attn.insert(l);
    else {
      attn.erase(l);
      m.cfg_.rnn_kind = lw.kind;
    }
    m.cfg_.attn_layers.assign(attn.begin(), attn.end());
    m.layers_.at(l) = std::move(lw);
    m.refresh();
    return m;
  }

  /// Independent copy of every tensor.
  Model deep_copy() const {
    Model m = *this;
    m.embed_ = embed_.detached_copy();
    if (unembed_.defined()) m.unembed_ = unembed_.detached_copy();
    m.final_gain_ = final_gain_.detached_copy();
    for (auto& l : m.layers_) l = l.deep_copy();
    return m;
  }

  /// Stable (name, tensor) list; the tied unembedding is not listed twice.
  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Var<T>>> out{{"embed", embed_}};
    if (!cfg_.tie_embeddings) out.emplace_back("unembed", unembed_);
    out.emplace_back("final_norm", final_gain_);
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (auto& [n, v] : layers_[l].named())
        out.emplace_back("layers." + std::to_string(l) + "." + n, v);
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& [n, v] : named_parameters()) out.push_back(v);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, v] : named_parameters()) n += v.size();
    return n;
  }

  void set_requires_grad(bool r) {
    for (auto& v : parameters()) v.set_requires_grad(r);
  }

 private:
  ModelConfig cfg_;
  Var<T> embed_, unembed_, final_gain_;
  std::vector<LayerWeights<T>> layers_;
  GammaVector gammas_;
};

/// Closed-form parameter count of a freshly initialized model.
inline std::size_t parameter_count_formula(const ModelConfig& c) {
  std::size_t n = c.vocab * c.d * (c.tie_embeddings ? 1 : 2) + c.d;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto m = c.mixer_config(l);
    n += 2 * c.d + 3 * c.d * c.ffn;
    n += 2 * c.d * m.q_width() + 2 * c.d * m.kv_width();
    if (m.qk_norm) n += 2 * c.head_dim;
    if (m.output_gate) n += c.d * m.q_width() + c.head_dim;
    if (!c.is_attention(l) && c.rnn_kind == MixerKind::DiagRNN) n += c.d * m.q_width();
  }
  return n;
}

// ------------------------------------------------------------------ forward

/// Per-layer tensors observed during a forward pass.
template <class T>
struct LayerCapture {
  Tensor<T> x_in;     // Norm(X^(l-1)), the mixer input
  Tensor<T> y_mixer;  // mixer output before the residual add
  Tensor<T> h;        // X^(l-1) + y_mixer
  Tensor<T> x_out;    // X^(l)
};

template <class T>
struct ForwardOptions {
  std::optional<LogitsScaling> scaling;  // overrides the config's scaling
  std::size_t start_pos = 0;
  std::vector<LayerCapture<T>>* capture = nullptr;  // filled for every layer
  std::vector<MixerTrace<T>>* traces = nullptr;     // caches / final states
};

template <class T>
Var<T> mlp_forward(const LayerWeights<T>& lw, const Var<T>& x) {
  return matmul(mul(silu(matmul(x, lw.w_gate)), matmul(x, lw.w_up)), lw.w_down);
}

/// Runs one layer's mixer on its (normalized) input x [B, T, d].
template <class T>
Var<T> mixer_forward(const Model<T>& m, std::size_t l, const LayerWeights<T>& lw, const Var<T>& x,
                     const LogitsScaling& scaling, std::size_t start_pos,
                     MixerTrace<T>* trace = nullptr) {
  const auto& c = m.config();
  const MixerConfig mc = c.mixer_config(l);
  switch (lw.kind) {
    case MixerKind::Attention:
      return attention_forward(x, lw.mixer, mc, scaling, start_pos, trace);
    case MixerKind::Lightning:
      return lightning_forward_chunked(x, lw.mixer, mc, m.gammas(), c.chunk, start_pos, trace);
    case MixerKind::DiagRNN:
      return diag_rnn_forward_parallel(x, lw.mixer, mc, start_pos, trace);
  }
  throw Error("unknown mixer kind");
}

/// Logits [B, T, vocab] for token ids laid out [B, T].
template <class T>
Var<T> forward(const Model<T>& m, const std::vector<int>& tokens, std::size_t B, std::size_t Tn,
               const ForwardOptions<T>& opt = {}) {
  const auto& c = m.config();
  if (tokens.size() != B * Tn)
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                     std::to_string(B) + " x " + std::to_string(Tn));
  const LogitsScaling scaling = opt.scaling ? *opt.scaling : c.scaling;
  const T eps = static_cast<T>(c.norm_eps);
  Var<T> x = embedding(m.embedding(), tokens, {B, Tn});
  if (opt.capture) opt.capture->assign(c.n_layers, {});
  if (opt.traces) opt.traces->assign(c.n_layers, {});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = m.layer(l);
    const Var<T> n = rmsnorm(x, lw.pre_mixer_gain, eps);
    const Var<T> y = mixer_forward(m, l, lw, n, scaling, opt.start_pos,
                                   opt.traces ? &(*opt.traces)[l] : nullptr);
    const Var<T> h = add(x, y);
    x = add(h, mlp_forward(lw, rmsnorm(h, lw.pre_mlp_gain, eps)));
    if (opt.capture) (*opt.capture)[l] = {n.value(), y.value(), h.value(), x.value()};
  }
  return matmul_nt(rmsnorm(x, m.final_gain(), eps), m.unembedding());
}

/// Logits [T, vocab] of one sequence, without recording.
template <class T>
Tensor<T> logits(const Model<T>& m, const std::vector<int>& tokens,
                 std::optional<LogitsScaling> scaling = std::nullopt) {
  NoGradScope<T> ng;
  ForwardOptions<T> o;
  o.scaling = scaling;
  return forward(m, tokens, 1, tokens.size(), o).value().reshaped({tokens.size(), m.config().vocab});
}

/// Mixer input and mixer output of layer l for one sequence (or a [B, T] batch).
template <class T>
std::pair<Tensor<T>, Tensor<T>> forward_capture(const Model<T>& m, const std::vector<int>& tokens,
                                                std::size_t l, std::size_t B = 1) {
  if (l >= m.config().n_layers)
    throw Error("forward_capture: layer " + std::to_string(l) + " out of range");
  NoGradScope<T> ng;
  std::vector<LayerCapture<T>> cap;
  ForwardOptions<T> o;
  o.capture = &cap;
  forward(m, tokens, B, tokens.size() / B, o);
  return {cap[l].x_in, cap[l].y_mixer};
}

// ------------------------------------------------------------------- decode

/// Incremental state for one sequence: a KV cache per attention layer and a
/// recurrent state per RNN layer.
template <class T>
struct DecodeSession {
  std::vector<std::optional<KvCache<T>>> caches;
  std::vector<std::optional<RecurrentState<T>>> states;
  std::size_t pos = 0;

  static DecodeSession empty(const ModelConfig& c) {
    DecodeSession s;
    s.caches.resize(c.n_layers);
    s.states.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      if (c.is_attention(l))
        s.caches[l].emplace(c.n_kv_heads, c.head_dim);
      else
        s.states[l] = RecurrentState<T>::zeros(c.n_heads, c.head_dim);
    }
    return s;
  }

  void check(const ModelConfig& c) const {
    if (caches.size() != c.n_layers || states.size() != c.n_layers)
      throw Error("decode session does not match the model depth");
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::size_t p = c.is_attention(l) ? (caches[l] ? caches[l]->pos() : SIZE_MAX)
                                              : (states[l] ? states[l]->pos : SIZE_MAX);
      if (p != pos)
        throw Error("decode session out of sync at layer " + std::to_string(l) + ": state at " +
                    (p == SIZE_MAX ? std::string("<missing>") : std::to_string(p)) +
                    ", session at " + std::to_string(pos));
    }
  }

  std::size_t kv_cache_bytes() const {
    std::size_t b = 0;
    for (const auto& c : caches)
      if (c) b += c->bytes();
    return b;
  }
  std::size_t recurrent_state_bytes() const {
    std::size_t b = 0;
    for (const auto& s : states)
      if (s) b += s->bytes();
    return b;
  }
};

/// Consumes one token at position session.pos and returns its logits [vocab].
template <class T>
Tensor<T> decode_step(const Model<T>& m, DecodeSession<T>& session, int token,
                      std::optional<LogitsScaling> scaling = std::nullopt) {
  const auto& c = m.config();
  session.check(c);
  NoGradScope<T> ng;
  const LogitsScaling sc = scaling ? *scaling : c.scaling;
  const T eps = static_cast<T>(c.norm_eps);
  Var<T> x = embedding(m.embedding(), {token}, {1, 1});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = m.layer(l);
    const MixerConfig mc = c.mixer_config(l);
    const Tensor<T> n = rmsnorm(x, lw.pre_mixer_gain, eps).value().reshaped({c.d});
    Tensor<T> y;
    switch (lw.kind) {
      case MixerKind::Attention:
        y = attention_decode_step(n, lw.mixer, mc, sc, *session.caches[l]);
        break;
      case MixerKind::Lightning:
        y = lightning_decode_step(n, lw.mixer, mc, m.gammas(), *session.states[l]);
        break;
      case MixerKind::DiagRNN:
        y = diag_rnn_decode_step(n, lw.mixer, mc, *session.states[l]);
        break;
    }
    const Var<T> h = add(x, Var<T>::constant(std::move(y).reshaped({1, 1, c.d})));
    x = add(h, mlp_forward(lw, rmsnorm(h, lw.pre_mlp_gain, eps)));
  }
  ++session.pos;
  return matmul_nt(rmsnorm(x, m.final_gain(), eps), m.unembedding()).value().reshaped({c.vocab});
}

/// Parallel forward over a prompt that leaves a ready decode session behind.
/// Returns the prompt logits [T, vocab].
template <class T>
Tensor<T> prefill(const Model<T>& m, const std::vector<int>& prompt, DecodeSession<T>& session,
                  std::optional<LogitsScaling> scaling = std::nullopt) {
  const auto& c = m.config();
  if (prompt.empty()) throw Error("prefill: empty prompt");
  NoGradScope<T> ng;
  std::vector<MixerTrace<T>> traces;
  ForwardOptions<T> o;
  o.scaling = scaling;
  o.traces = &traces;
  const std::size_t Tn = prompt.size();
  Tensor<T> out = forward(m, prompt, 1, Tn, o).value().reshaped({Tn, c.vocab});
  session = DecodeSession<T>::empty(c);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (c.is_attention(l)) {
      auto& cache = *session.caches[l];
      cache.reserve(Tn + 64);
      cache.append_block(traces[l].k.data(), traces[l].v.data(), Tn);
    } else {
      session.states[l] = RecurrentState<T>{
          std::move(traces[l].state).reshaped({c.n_heads, c.head_dim, c.head_dim}), Tn};
    }
  }
  session.pos = Tn;
  return out;
}

/// Greedy continuation of `prompt` by n tokens.
template <class T>
std::vector<int> greedy_decode(const Model<T>& m, const std::vector<int>& prompt, std::size_t n,
                               std::optional<LogitsScaling> scaling = std::nullopt) {
  DecodeSession<T> s;
  const Tensor<T> pl = prefill(m, prompt, s, scaling);
  const std::size_t V = m.config().vocab;
  auto argmax = [V](const T* row) {
    return static_cast<int>(std::max_element(row, row + V) - row);
  };
  std::vector<int> out;
  if (n == 0) return out;
  out.push_back(argmax(pl.data() + (prompt.size() - 1) * V));
  while (out.size() < n) {
    const Tensor<T> lg = decode_step(m, s, out.back(), scaling);
    out.push_back(argmax(lg.data()));
  }
  return out;
}

// ------------------------------------------------------------- conversion

/// Hybrid initialized from an attention-only teacher. Layers outside I_attn
/// become RNN layers whose W_q/W_k/W_v/W_o come from the teacher (KV heads
/// cloned per query head); QK-norm gains are copied, and W_z plus the output
/// norm are fresh. Layers in I_attn are exact teacher copies (RoPE, no gate)
/// until prepare_stage2 is applied.
template <class T>
Model<T> init_hybrid_from_teacher(const Model<T>& teacher, std::vector<std::size_t> attn_layers,
                                  Rng& rng, MixerKind rnn_kind = MixerKind::Lightning) {
  const ModelConfig& tc = teacher.config();
  if (!tc.is_transformer()) throw ConfigError("teacher must be attention-only");
  std::sort(attn_layers.begin(), attn_layers.end());
  ModelConfig hc = tc;
  hc.attn_layers = attn_layers;
  hc.rnn_kind = rnn_kind;
  hc.rnn_pe = PosEncoding::RoPE;
  hc.rnn_gate = true;
  hc.validate();
  const Model<T> t = teacher.deep_copy();
  Model<T> h;
  h.set_embedding(t.embedding());
  if (!tc.tie_embeddings) h.set_unembedding(t.unembedding());
  h.set_final_gain(t.final_gain());
  std::vector<LayerWeights<T>> layers;
  const std::size_t g = tc.n_heads / tc.n_kv_heads;
  for (std::size_t l = 0; l < tc.n_layers; ++l) {
    LayerWeights<T> lw = t.layer(l);
    if (!hc.is_attention(l)) {
      const MixerConfig mc = hc.mixer_config(l);
      auto [cloned, cc] = gqa_to_mha_clone(lw.mixer, tc.mixer_config(l), g);
      lw.kind = rnn_kind;
      lw.mixer = cloned;
      if (mc.qk_norm && !lw.mixer.q_norm.defined()) {
        lw.mixer.q_norm = Var<T>::parameter(Tensor<T>::ones({mc.head_dim}));
        lw.mixer.k_norm = Var<T>::parameter(Tensor<T>::ones({mc.head_dim}));
      }
      lw.mixer.wz = Var<T>::parameter(randn<T>({mc.d, mc.q_width()}, rng, hc.init_std));
      lw.mixer.out_norm = Var<T>::parameter(Tensor<T>::ones({mc.head_dim}));
      if (rnn_kind == MixerKind::DiagRNN)
        lw.mixer.wf = Var<T>::parameter(randn<T>({mc.d, mc.q_width()}, rng, hc.init_std));
    }
    layers.push_back(std::move(lw));
  }
  h.set_layers(std::move(layers));
  h.set_config(hc);
  return h;
}

/// Switches attention layers to NoPE and gives each a fresh output gate.
template <class T>
Model<T> prepare_stage2(const Model<T>& hybrid, Rng& rng) {
  ModelConfig c = hybrid.config();
  Model<T> h = hybrid;
  const bool had_gate = c.attn_gate;
  c.attn_pe = PosEncoding::NoPE;
  c.attn_gate = true;
  auto layers = h.layers();
  if (!had_gate)
    for (std::size_t l : c.attn_layers) {
      auto& mw = layers[l].mixer;
      mw.wz = Var<T>::parameter(randn<T>({c.d, c.n_heads * c.head_dim}, rng, c.init_std));
      mw.out_norm = Var<T>::parameter(Tensor<T>::ones({c.head_dim}));
    }
  h.set_layers(std::move(layers));
  h.set_config(c);
  return h;
}

}  // namespace hybridkit
