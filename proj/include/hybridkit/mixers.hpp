// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "hybridkit/autodiff.hpp"
#include "hybridkit/positional.hpp"

namespace hybridkit {

enum class MixerKind { Attention, Lightning, DiagRNN };
enum class PosEncoding { RoPE, NoPE };

inline const char* to_string(MixerKind k) {
  switch (k) {
    case MixerKind::Attention:
      return "attention";
    case MixerKind::Lightning:
      return "lightning";
    case MixerKind::DiagRNN:
      return "diag_rnn";
  }
  return "?";
}
inline const char* to_string(PosEncoding p) { return p == PosEncoding::RoPE ? "rope" : "nope"; }

/// Shape and feature switches for one token mixer.
struct MixerConfig {
  std::size_t d = 256;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;
  std::size_t head_dim = 64;
  bool qk_norm = true;
  bool output_gate = true;
  PosEncoding pe = PosEncoding::NoPE;
  RopeParams rope{50000.0, 64};
  double norm_eps = 1e-6;

  std::size_t group_size() const {
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0)
      throw ConfigError("query heads " + std::to_string(n_heads) +
                        " are not a multiple of kv heads " + std::to_string(n_kv_heads));
    return n_heads / n_kv_heads;
  }
  std::size_t q_width() const { return n_heads * head_dim; }
  std::size_t kv_width() const { return n_kv_heads * head_dim; }
};

/// Projection set shared by attention and RNN mixers. Shapes are [d, heads*head_dim];
/// y = x·W for W_q/W_k/W_v/W_z and y = o·W_oᵀ for the output.
template <class T>
struct MixerWeights {
  Var<T> wq, wk, wv, wo;
  Var<T> wz;              // output gate, present iff the gate is enabled
  Var<T> q_norm, k_norm;  // QK-norm gains over head_dim, shared by heads
  Var<T> out_norm;        // gain of the per-head output norm (with the gate)
  Var<T> wf;              // forget-gate projection (diagonal RNN only)

  /// (name, var) for every defined tensor, in a fixed order.
  std::vector<std::pair<std::string, Var<T>>> named() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    auto push = [&](const char* n, const Var<T>& v) {
      if (v.defined()) out.emplace_back(n, v);
    };
    push("wq", wq);
    push("wk", wk);
    push("wv", wv);
    push("wo", wo);
    push("wz", wz);
    push("q_norm", q_norm);
    push("k_norm", k_norm);
    push("out_norm", out_norm);
    push("wf", wf);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : named()) n += v.size();
    return n;
  }

  MixerWeights deep_copy() const {
    MixerWeights c;
    auto cp = [](const Var<T>& v) { return v.defined() ? v.detached_copy() : Var<T>(); };
    c.wq = cp(wq);
    c.wk = cp(wk);
    c.wv = cp(wv);
    c.wo = cp(wo);
    c.wz = cp(wz);
    c.q_norm = cp(q_norm);
    c.k_norm = cp(k_norm);
    c.out_norm = cp(out_norm);
    c.wf = cp(wf);
    return c;
  }

  void set_requires_grad(bool r) {
    for (auto& [name, v] : named()) const_cast<Var<T>&>(v).set_requires_grad(r);
  }
};

/// Fresh weights: projections ~ N(0, 0.02), gains = 1.
template <class T>
MixerWeights<T> init_mixer_weights(const MixerConfig& cfg, MixerKind kind, Rng& rng,
                                   double stddev = 0.02) {
  cfg.group_size();
  MixerWeights<T> w;
  const std::size_t d = cfg.d, qw = cfg.q_width(), kw = cfg.kv_width();
  w.wq = Var<T>::parameter(randn<T>({d, qw}, rng, stddev));
  w.wk = Var<T>::parameter(randn<T>({d, kw}, rng, stddev));
  w.wv = Var<T>::parameter(randn<T>({d, kw}, rng, stddev));
  w.wo = Var<T>::parameter(randn<T>({d, qw}, rng, stddev));
  if (cfg.qk_norm) {
    w.q_norm = Var<T>::parameter(Tensor<T>::ones({cfg.head_dim}));
    w.k_norm = Var<T>::parameter(Tensor<T>::ones({cfg.head_dim}));
  }
  if (cfg.output_gate) {
    w.wz = Var<T>::parameter(randn<T>({d, qw}, rng, stddev));
    w.out_norm = Var<T>::parameter(Tensor<T>::ones({cfg.head_dim}));
  }
  if (kind == MixerKind::DiagRNN) w.wf = Var<T>::parameter(randn<T>({d, qw}, rng, stddev));
  return w;
}

template <class T>
void check_mixer_shapes(const MixerWeights<T>& w, const MixerConfig& cfg) {
  auto expect = [](const Var<T>& v, const Shape& s, const char* name) {
    if (!v.defined() || v.shape() != s)
      throw ShapeError(std::string("mixer weight ") + name + " has shape " +
                       (v.defined() ? shape_str(v.shape()) : "<missing>") + ", expected " +
                       shape_str(s));
  };
  expect(w.wq, {cfg.d, cfg.q_width()}, "wq");
  expect(w.wk, {cfg.d, cfg.kv_width()}, "wk");
  expect(w.wv, {cfg.d, cfg.kv_width()}, "wv");
  expect(w.wo, {cfg.d, cfg.q_width()}, "wo");
  if (cfg.output_gate != w.wz.defined())
    throw ConfigError("W_z must be present exactly when the output gate is enabled");
  if (cfg.output_gate) expect(w.out_norm, {cfg.head_dim}, "out_norm");
  if (cfg.qk_norm) {
    expect(w.q_norm, {cfg.head_dim}, "q_norm");
    expect(w.k_norm, {cfg.head_dim}, "k_norm");
  }
}

// ------------------------------------------------------------------ decays

using GammaVector = std::vector<double>;

/// Per-head Lightning Attention decay γ_h = exp(-2^(-8h/H)), h = 1..H.
inline GammaVector gamma_slopes(std::size_t H) {
  if (H < 1) throw ConfigError("gamma_slopes needs at least one head");
  GammaVector g(H);
  for (std::size_t h = 1; h <= H; ++h)
    g[h - 1] = std::exp(-std::exp2(-8.0 * static_cast<double>(h) / static_cast<double>(H)));
  return g;
}

/// γ^n evaluated in log space; γ = 0 gives 0 for n > 0 and 1 for n = 0.
inline double decay_pow(double gamma, double n) {
  if (n == 0) return 1.0;
  if (gamma <= 0) return 0.0;
  return std::exp(n * std::log(gamma));
}

// ------------------------------------------------------------------ states

/// Per-head d_h × d_h recurrent state of one sequence.
template <class T>
struct RecurrentState {
  Tensor<T> S;  // [n_heads, head_dim, head_dim]
  std::size_t pos = 0;

  static RecurrentState zeros(std::size_t H, std::size_t D) {
    return {Tensor<T>({H, D, D}), 0};
  }
  std::size_t heads() const { return S.empty() ? 0 : S.dim(0); }
  std::size_t bytes() const { return S.size() * sizeof(T); }
};

/// Append-only key/value cache of one attention layer for one sequence.
template <class T>
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_kv_heads, std::size_t head_dim)
      : H_(n_kv_heads), D_(head_dim), k_(n_kv_heads), v_(n_kv_heads) {}

  std::size_t pos() const { return pos_; }
  std::size_t heads() const { return H_; }
  std::size_t head_dim() const { return D_; }
  std::size_t bytes() const { return 2 * H_ * pos_ * D_ * sizeof(T); }

  /// k, v: [n_kv_heads, D] for one new position.
  void append(const T* k, const T* v) {
    for (std::size_t h = 0; h < H_; ++h) {
      k_[h].insert(k_[h].end(), k + h * D_, k + (h + 1) * D_);
      v_[h].insert(v_[h].end(), v + h * D_, v + (h + 1) * D_);
    }
    ++pos_;
  }

  /// Bulk append of n positions laid out [n_kv_heads, n, D].
  void append_block(const T* k, const T* v, std::size_t n) {
    for (std::size_t h = 0; h < H_; ++h) {
      k_[h].insert(k_[h].end(), k + h * n * D_, k + (h + 1) * n * D_);
      v_[h].insert(v_[h].end(), v + h * n * D_, v + (h + 1) * n * D_);
    }
    pos_ += n;
  }

  void reserve(std::size_t n) {
    for (std::size_t h = 0; h < H_; ++h) {
      k_[h].reserve(n * D_);
      v_[h].reserve(n * D_);
    }
  }

  const T* keys(std::size_t h) const { return k_[h].data(); }
  const T* values(std::size_t h) const { return v_[h].data(); }

  Tensor<T> K() const { return gather(k_); }
  Tensor<T> V() const { return gather(v_); }

 private:
  Tensor<T> gather(const std::vector<std::vector<T>>& src) const {
    Tensor<T> t({H_, pos_, D_});
    for (std::size_t h = 0; h < H_; ++h) std::copy(src[h].begin(), src[h].end(), t.data() + h * pos_ * D_);
    return t;
  }

  std::size_t H_ = 0, D_ = 0, pos_ = 0;
  std::vector<std::vector<T>> k_, v_;
};

/// What a parallel mixer forward leaves behind for a decode session.
template <class T>
struct MixerTrace {
  Tensor<T> k, v;   // attention: [B, n_kv_heads, T, D] as cached
  Tensor<T> state;  // RNN: final [B, H, D, D]
};

// --------------------------------------------------------------- helpers

namespace detail {

/// [B, T, H*D] -> [B, H, T, D]
template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t H, std::size_t D) {
  const std::size_t B = x.shape()[0], Tn = x.shape()[1];
  return transpose12(reshape(x, {B, Tn, H, D}));
}

/// [B, H, T, D] -> [B, T, H*D]
template <class T>
Var<T> merge_heads(const Var<T>& x) {
  const auto& s = x.shape();
  return reshape(transpose12(x), {s[0], s[2], s[1] * s[3]});
}

/// Constant [T, D] tensor whose row t is filled with f(start + t).
template <class T, class F>
Var<T> row_factors(std::size_t Tn, std::size_t D, std::size_t start, F f) {
  Tensor<T> t({Tn, D});
  for (std::size_t i = 0; i < Tn; ++i) {
    const T v = static_cast<T>(f(start + i));
    for (std::size_t j = 0; j < D; ++j) t[i * D + j] = v;
  }
  return Var<T>::constant(std::move(t));
}

template <class T>
Var<T> as_batched(const Var<T>& x) {
  if (x.shape().size() == 3) return x;
  if (x.shape().size() == 2) return reshape(x, {1, x.shape()[0], x.shape()[1]});
  throw ShapeError("mixer input must be [T, d] or [B, T, d], got " + shape_str(x.shape()));
}

template <class T>
Var<T> restore_rank(const Var<T>& y, const Var<T>& x) {
  return x.shape().size() == 2 ? reshape(y, {y.shape()[1], y.shape()[2]}) : y;
}

/// Gated, normalized output path: (Norm(o) ⊙ sigmoid(x W_z)) W_oᵀ, or o W_oᵀ without a gate.
template <class T>
Var<T> mixer_output(const Var<T>& o, const Var<T>& x, const MixerWeights<T>& w,
                    const MixerConfig& cfg) {
  Var<T> h = o;
  if (cfg.output_gate) {
    const Var<T> z = split_heads(sigmoid(matmul(x, w.wz)), cfg.n_heads, cfg.head_dim);
    h = mul(rmsnorm(o, w.out_norm, T(cfg.norm_eps)), z);
  }
  return matmul_nt(merge_heads(h), w.wo);
}

template <class T>
struct Qkv {
  Var<T> q, k, v;  // [B, heads, T, D]
};

/// RNN-side projections: q, k normalized then rotated; k scaled by 1/sqrt(D).
template <class T>
Qkv<T> rnn_qkv(const Var<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg,
               std::size_t start) {
  const std::size_t H = cfg.n_heads, D = cfg.head_dim;
  if (cfg.n_kv_heads != H)
    throw ConfigError("RNN mixers need one KV head per query head; clone GQA weights first");
  Var<T> q = split_heads(matmul(x, w.wq), H, D);
  Var<T> k = split_heads(matmul(x, w.wk), H, D);
  Var<T> v = split_heads(matmul(x, w.wv), H, D);
  if (cfg.qk_norm) {
    q = rmsnorm(q, w.q_norm, T(cfg.norm_eps));
    k = rmsnorm(k, w.k_norm, T(cfg.norm_eps));
  }
  if (cfg.pe == PosEncoding::RoPE) {
    q = rope(q, start, cfg.rope);
    k = rope(k, start, cfg.rope);
  }
  k = scale(k, T(1) / std::sqrt(T(D)));
  return {q, k, v};
}

}  // namespace detail

// ---------------------------------------------------------------- attention

/// Fused causal softmax attention over [B, H, T, D] queries and [B, H, S, D]
/// keys/values (S >= T; query i sits at key position i + S - T). Queries are
/// expected pre-scaled. Without a recording tape the probabilities are never
/// materialized beyond a block of query rows.
template <class T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const auto& qs = q.shape();
  const auto& ks = k.shape();
  if (qs.size() != 4 || ks.size() != 4 || v.shape() != ks || qs[0] != ks[0] || qs[1] != ks[1] ||
      qs[3] != ks[3] || ks[2] < qs[2])
    throw ShapeError("causal_attention shapes " + shape_str(qs) + ", " + shape_str(ks) + ", " +
                     shape_str(v.shape()));
  const std::size_t BH = qs[0] * qs[1], Tn = qs[2], S = ks[2], D = qs[3];
  Tape<T>* tp = ad::recording<T>(q, k, v);
  Tensor<T> out(qs);
  Tensor<T> probs;
  if (tp) probs = Tensor<T>({BH, Tn, S});
  const std::size_t block = tp ? Tn : std::min<std::size_t>(Tn, 256);
  std::vector<T> scratch(block * S);
  for (std::size_t bh = 0; bh < BH; ++bh) {
    const T* Q = q.value().data() + bh * Tn * D;
    const T* K = k.value().data() + bh * S * D;
    const T* Vv = v.value().data() + bh * S * D;
    T* O = out.data() + bh * Tn * D;
    for (std::size_t r0 = 0; r0 < Tn; r0 += block) {
      const std::size_t rows = std::min(block, Tn - r0);
      // Visible keys end at r0 + rows - 1 + (S - Tn).
      const std::size_t kl = r0 + rows + (S - Tn);
      T* P = tp ? probs.data() + (bh * Tn + r0) * S : scratch.data();
      kernels::gemm(false, true, rows, kl, D, Q + r0 * D, K, P);
      // Repack rows of width kl to width S and apply the causal softmax.
      for (std::size_t r = rows; r-- > 0;) {
        T* src = P + r * kl;
        T* dst = P + r * S;
        std::copy_backward(src, src + kl, dst + kl);
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T* row = P + r * S;
        const std::size_t lim = r0 + r + (S - Tn) + 1;
        T m = row[0];
        for (std::size_t s = 1; s < lim; ++s) m = std::max(m, row[s]);
        T z = 0;
        for (std::size_t s = 0; s < lim; ++s) {
          row[s] = std::exp(row[s] - m);
          z += row[s];
        }
        const T inv = T(1) / z;
        for (std::size_t s = 0; s < lim; ++s) row[s] *= inv;
        for (std::size_t s = lim; s < S; ++s) row[s] = T(0);
      }
      kernels::gemm_nn(rows, D, kl, P, S, Vv, D, O + r0 * D, D);
    }
  }
  Var<T> r(std::move(out));
  if (tp) {
    ad::attach(
        *tp, r,
        [qn = q.node(), kn = k.node(), vn = v.node(), probs = std::move(probs), BH, Tn, S,
         D](const Tensor<T>& g) {
          std::vector<T> dP(Tn * S);
          T* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
          T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
          T* gv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
          for (std::size_t bh = 0; bh < BH; ++bh) {
            const T* P = probs.data() + bh * Tn * S;
            const T* G = g.data() + bh * Tn * D;
            const T* Q = qn->value.data() + bh * Tn * D;
            const T* K = kn->value.data() + bh * S * D;
            const T* Vv = vn->value.data() + bh * S * D;
            if (gv) kernels::gemm(true, false, S, D, Tn, P, G, gv + bh * S * D, true);
            kernels::gemm(false, true, Tn, S, D, G, Vv, dP.data());
            for (std::size_t t = 0; t < Tn; ++t) {
              const T* pr = P + t * S;
              T* dr = dP.data() + t * S;
              T dot = 0;
              for (std::size_t s = 0; s < S; ++s) dot += pr[s] * dr[s];
              for (std::size_t s = 0; s < S; ++s) dr[s] = pr[s] * (dr[s] - dot);
            }
            if (gq) kernels::gemm(false, false, Tn, D, S, dP.data(), K, gq + bh * Tn * D, true);
            if (gk) kernels::gemm(true, false, S, D, Tn, dP.data(), Q, gk + bh * S * D, true);
          }
        },
        q, k, v);
  }
  return r;
}

/// Causal softmax attention layer: no rotary encoding unless cfg.pe says so,
/// q scaled by s_t / sqrt(D), optional QK-norm, optional output gate, GQA
/// sharing each KV head across group_size() query heads.
template <class T>
Var<T> attention_forward(const Var<T>& X, const MixerWeights<T>& w, const MixerConfig& cfg,
                         const LogitsScaling& scaling = {}, std::size_t start_pos = 0,
                         MixerTrace<T>* trace = nullptr) {
  const std::size_t g = cfg.group_size();
  check_mixer_shapes(w, cfg);
  const Var<T> x = detail::as_batched(X);
  const std::size_t Tn = x.shape()[1], D = cfg.head_dim;
  Var<T> q = detail::split_heads(matmul(x, w.wq), cfg.n_heads, D);
  Var<T> k = detail::split_heads(matmul(x, w.wk), cfg.n_kv_heads, D);
  Var<T> v = detail::split_heads(matmul(x, w.wv), cfg.n_kv_heads, D);
  if (cfg.qk_norm) {
    q = rmsnorm(q, w.q_norm, T(cfg.norm_eps));
    k = rmsnorm(k, w.k_norm, T(cfg.norm_eps));
  }
  if (cfg.pe == PosEncoding::RoPE) {
    q = rope(q, start_pos, cfg.rope);
    k = rope(k, start_pos, cfg.rope);
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(D));
  q = mul(q, detail::row_factors<T>(Tn, D, start_pos,
                                    [&](std::size_t t) { return scaling.factor(t) * inv_sqrt; }));
  if (trace) {
    trace->k = k.value();
    trace->v = v.value();
  }
  const Var<T> o = causal_attention(q, repeat_heads(k, g), repeat_heads(v, g));
  return detail::restore_rank(detail::mixer_output(o, x, w, cfg), X);
}

// ------------------------------------------------------- lightning attention

namespace detail {

/// Decay constants for one chunk length C and head set (all in log space).
template <class T>
struct ChunkDecay {
  Var<T> intra;  // [H, C, C]: γ^(t-s) for s <= t, else 0
  Var<T> qdec;   // [H, C, D]: γ^(t+1)
  Var<T> kdec;   // [H, C, D]: γ^(C-1-s)
  Var<T> sdec;   // [H, D, D]: γ^C

  ChunkDecay(const GammaVector& gam, std::size_t C, std::size_t D) {
    const std::size_t H = gam.size();
    Tensor<T> a({H, C, C}), qd({H, C, D}), kd({H, C, D}), sd({H, D, D});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < C; ++t) {
        for (std::size_t s = 0; s <= t; ++s)
          a[(h * C + t) * C + s] = static_cast<T>(decay_pow(gam[h], double(t - s)));
        const T qv = static_cast<T>(decay_pow(gam[h], double(t + 1)));
        const T kv = static_cast<T>(decay_pow(gam[h], double(C - 1 - t)));
        for (std::size_t j = 0; j < D; ++j) {
          qd[(h * C + t) * D + j] = qv;
          kd[(h * C + t) * D + j] = kv;
        }
      }
      const T sv = static_cast<T>(decay_pow(gam[h], double(C)));
      for (std::size_t j = 0; j < D * D; ++j) sd[h * D * D + j] = sv;
    }
    intra = Var<T>::constant(std::move(a));
    qdec = Var<T>::constant(std::move(qd));
    kdec = Var<T>::constant(std::move(kd));
    sdec = Var<T>::constant(std::move(sd));
  }
};

}  // namespace detail

/// Chunked constant-decay linear attention scan over [B, H, T, D] inputs:
/// within a chunk the output is ((q kᵀ) ⊙ Γ) v, across chunks the carried state
/// contributes γ^(t+1) q S. Returns o; the final state goes to *final_state.
template <class T>
Var<T> lightning_scan_chunked(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                              const GammaVector& gammas, std::size_t chunk,
                              const Var<T>* initial_state = nullptr,
                              Var<T>* final_state = nullptr) {
  if (chunk < 1) throw ConfigError("chunk size must be >= 1");
  const auto& s = q.shape();
  const std::size_t H = s[1], Tn = s[2], D = s[3];
  if (gammas.size() != H)
    throw ShapeError("gamma vector has " + std::to_string(gammas.size()) + " heads, input has " +
                     std::to_string(H));
  std::map<std::size_t, detail::ChunkDecay<T>> decays;
  auto decay_for = [&](std::size_t C) -> const detail::ChunkDecay<T>& {
    auto it = decays.find(C);
    if (it == decays.end()) it = decays.emplace(C, detail::ChunkDecay<T>(gammas, C, D)).first;
    return it->second;
  };
  std::optional<Var<T>> S;
  if (initial_state) S = *initial_state;
  std::vector<Var<T>> outs;
  for (std::size_t t0 = 0; t0 < Tn; t0 += chunk) {
    const std::size_t C = std::min(chunk, Tn - t0);
    const auto& dec = decay_for(C);
    const bool whole = C == Tn;
    const Var<T> qc = whole ? q : slice(q, 2, t0, C);
    const Var<T> kc = whole ? k : slice(k, 2, t0, C);
    const Var<T> vc = whole ? v : slice(v, 2, t0, C);
    Var<T> oc = matmul(mul(matmul_nt(qc, kc), dec.intra), vc);
    if (S) oc = add(oc, mul(matmul(qc, *S), dec.qdec));
    const Var<T> kv = matmul_tn(mul(kc, dec.kdec), vc);
    S = S ? add(mul(*S, dec.sdec), kv) : kv;
    outs.push_back(oc);
  }
  if (final_state) *final_state = *S;
  return concat(outs, 2);
}

/// Lightning Attention layer in chunked form.
template <class T>
Var<T> lightning_forward_chunked(const Var<T>& X, const MixerWeights<T>& w,
                                 const MixerConfig& cfg, const GammaVector& gammas,
                                 std::size_t chunk, std::size_t start_pos = 0,
                                 MixerTrace<T>* trace = nullptr,
                                 const Tensor<T>* initial_state = nullptr) {
  check_mixer_shapes(w, cfg);
  const Var<T> x = detail::as_batched(X);
  const auto qkv = detail::rnn_qkv(x, w, cfg, start_pos);
  Var<T> S_final;
  std::optional<Var<T>> S0;
  if (initial_state) S0 = Var<T>::constant(*initial_state);
  const Var<T> o = lightning_scan_chunked(qkv.q, qkv.k, qkv.v, gammas, chunk,
                                          S0 ? &*S0 : nullptr, &S_final);
  if (trace) trace->state = S_final.value();
  return detail::restore_rank(detail::mixer_output(o, x, w, cfg), X);
}

namespace detail {

/// S = γ S + kᵀ v; o = q S, one head at a time, one step at a time.
template <class T>
void lightning_recurrence(const T* q, const T* k, const T* v, T* o, T* S, std::size_t Tn,
                          std::size_t D, T gamma) {
  for (std::size_t t = 0; t < Tn; ++t) {
    const T* qt = q + t * D;
    const T* kt = k + t * D;
    const T* vt = v + t * D;
    T* ot = o + t * D;
    for (std::size_t i = 0; i < D; ++i) {
      T* Si = S + i * D;
      for (std::size_t j = 0; j < D; ++j) Si[j] = gamma * Si[j] + kt[i] * vt[j];
    }
    for (std::size_t j = 0; j < D; ++j) ot[j] = T(0);
    for (std::size_t i = 0; i < D; ++i) {
      const T* Si = S + i * D;
      for (std::size_t j = 0; j < D; ++j) ot[j] += qt[i] * Si[j];
    }
  }
}

}  // namespace detail

/// Lightning Attention layer in recurrent form for one sequence X [T, d].
/// Continues from `state` when given (its pos is the absolute start position).
template <class T>
std::pair<Tensor<T>, RecurrentState<T>> lightning_forward_recurrent(
    const Tensor<T>& X, const MixerWeights<T>& w, const MixerConfig& cfg,
    const GammaVector& gammas, std::type_identity_t<std::optional<RecurrentState<T>>> state = std::nullopt) {
  NoGradScope<T> ng;
  check_mixer_shapes(w, cfg);
  const std::size_t H = cfg.n_heads, D = cfg.head_dim;
  if (gammas.size() != H) throw ShapeError("gamma vector length does not match heads");
  RecurrentState<T> st = state ? std::move(*state) : RecurrentState<T>::zeros(H, D);
  if (st.heads() != H || st.S.dim(1) != D)
    throw ShapeError("recurrent state has " + std::to_string(st.heads()) + " heads, layer has " +
                     std::to_string(H));
  if (X.rank() != 2 || X.dim(1) != cfg.d) throw ShapeError("recurrent form expects X [T, d]");
  const std::size_t Tn = X.dim(0);
  const Var<T> x = Var<T>::constant(X.reshaped({1, Tn, cfg.d}));
  const auto qkv = detail::rnn_qkv(x, w, cfg, st.pos);
  Tensor<T> o({1, H, Tn, D});
  for (std::size_t h = 0; h < H; ++h)
    detail::lightning_recurrence(qkv.q.value().data() + h * Tn * D,
                                 qkv.k.value().data() + h * Tn * D,
                                 qkv.v.value().data() + h * Tn * D, o.data() + h * Tn * D,
                                 st.S.data() + h * D * D, Tn, D, static_cast<T>(gammas[h]));
  const Var<T> y = detail::mixer_output(Var<T>::constant(std::move(o)), x, w, cfg);
  st.pos += Tn;
  return {y.value().reshaped({Tn, cfg.d}), std::move(st)};
}

// ------------------------------------------------------ diagonal-decay RNN

/// Exponent applied to the sigmoid forget head: f = sigmoid(x W_f)^(1/16).
inline constexpr double kForgetPower = 1.0 / 16.0;

/// Data-dependent diagonal scan over [B, H, T, D]:
///   S_t = diag(f_t) S_{t-1} + k_tᵀ v_t,  o_t = q_t S_t.
/// Every f entry must lie in [0, 1].
template <class T>
Var<T> diag_scan(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& f,
                 const Tensor<T>* initial_state = nullptr, Tensor<T>* final_state = nullptr) {
  const auto& s = q.shape();
  if (s.size() != 4 || k.shape() != s || v.shape() != s || f.shape() != s)
    throw ShapeError("diag_scan expects four equal [B,H,T,D] shapes");
  for (T x : f.value().storage())
    if (!(x >= T(0) && x <= T(1)))
      throw Error("forget gate value " + std::to_string(double(x)) + " outside [0, 1]");
  const std::size_t BH = s[0] * s[1], Tn = s[2], D = s[3];
  Tape<T>* tp = ad::recording<T>(q, k, v, f);
  Tensor<T> out(s);
  Tensor<T> states;  // [BH, T+1, D, D] when recording
  if (tp) states = Tensor<T>({BH, Tn + 1, D, D});
  if (final_state) *final_state = Tensor<T>({s[0], s[1], D, D});
  std::vector<T> S(D * D);
  for (std::size_t bh = 0; bh < BH; ++bh) {
    if (initial_state)
      std::copy_n(initial_state->data() + bh * D * D, D * D, S.begin());
    else
      std::fill(S.begin(), S.end(), T(0));
    if (tp) std::copy(S.begin(), S.end(), states.data() + bh * (Tn + 1) * D * D);
    for (std::size_t t = 0; t < Tn; ++t) {
      const std::size_t off = (bh * Tn + t) * D;
      const T* qt = q.value().data() + off;
      const T* kt = k.value().data() + off;
      const T* vt = v.value().data() + off;
      const T* ft = f.value().data() + off;
      T* ot = out.data() + off;
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) S[i * D + j] = ft[i] * S[i * D + j] + kt[i] * vt[j];
      for (std::size_t j = 0; j < D; ++j) ot[j] = T(0);
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) ot[j] += qt[i] * S[i * D + j];
      if (tp) std::copy(S.begin(), S.end(), states.data() + (bh * (Tn + 1) + t + 1) * D * D);
    }
    if (final_state) std::copy(S.begin(), S.end(), final_state->data() + bh * D * D);
  }
  Var<T> r(std::move(out));
  if (tp) {
    ad::attach(
        *tp, r,
        [qn = q.node(), kn = k.node(), vn = v.node(), fn = f.node(), states = std::move(states),
         BH, Tn, D](const Tensor<T>& g) {
          auto buf = [](const std::shared_ptr<Node<T>>& n) {
            return n->requires_grad ? n->grad_buffer().data() : nullptr;
          };
          T* gq = buf(qn);
          T* gk = buf(kn);
          T* gv = buf(vn);
          T* gf = buf(fn);
          std::vector<T> G(D * D);
          for (std::size_t bh = 0; bh < BH; ++bh) {
            std::fill(G.begin(), G.end(), T(0));
            for (std::size_t t = Tn; t-- > 0;) {
              const std::size_t off = (bh * Tn + t) * D;
              const T* St = states.data() + (bh * (Tn + 1) + t + 1) * D * D;
              const T* Sp = states.data() + (bh * (Tn + 1) + t) * D * D;
              const T* qt = qn->value.data() + off;
              const T* kt = kn->value.data() + off;
              const T* vt = vn->value.data() + off;
              const T* gt = g.data() + off;
              if (t + 1 < Tn) {
                const T* fnext = fn->value.data() + off + D;
                for (std::size_t i = 0; i < D; ++i)
                  for (std::size_t j = 0; j < D; ++j) G[i * D + j] *= fnext[i];
              }
              for (std::size_t i = 0; i < D; ++i)
                for (std::size_t j = 0; j < D; ++j) G[i * D + j] += qt[i] * gt[j];
              for (std::size_t i = 0; i < D; ++i) {
                T dq = 0, dk = 0, df = 0;
                for (std::size_t j = 0; j < D; ++j) {
                  dq += gt[j] * St[i * D + j];
                  dk += G[i * D + j] * vt[j];
                  df += G[i * D + j] * Sp[i * D + j];
                }
                if (gq) gq[off + i] += dq;
                if (gk) gk[off + i] += dk;
                if (gf) gf[off + i] += df;
              }
              if (gv)
                for (std::size_t j = 0; j < D; ++j) {
                  T dv = 0;
                  for (std::size_t i = 0; i < D; ++i) dv += kt[i] * G[i * D + j];
                  gv[off + j] += dv;
                }
            }
          }
        },
        q, k, v, f);
  }
  return r;
}

/// Forget values from the documented gate head: sigmoid(x W_f)^(1/16), [B, H, T, D].
template <class T>
Var<T> diag_forget_gates(const Var<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg) {
  if (!w.wf.defined()) throw ConfigError("diagonal RNN weights lack the forget projection W_f");
  return detail::split_heads(sigmoid_pow(matmul(x, w.wf), T(kForgetPower)), cfg.n_heads,
                             cfg.head_dim);
}

/// Diagonal-transition RNN layer with gates from W_f (differentiable path).
template <class T>
Var<T> diag_rnn_forward_parallel(const Var<T>& X, const MixerWeights<T>& w,
                                 const MixerConfig& cfg, std::size_t start_pos = 0,
                                 MixerTrace<T>* trace = nullptr,
                                 const Tensor<T>* initial_state = nullptr) {
  check_mixer_shapes(w, cfg);
  const Var<T> x = detail::as_batched(X);
  const auto qkv = detail::rnn_qkv(x, w, cfg, start_pos);
  const Var<T> f = diag_forget_gates(x, w, cfg);
  Tensor<T> S;
  const Var<T> o = diag_scan(qkv.q, qkv.k, qkv.v, f, initial_state, &S);
  if (trace) trace->state = std::move(S);
  return detail::restore_rank(detail::mixer_output(o, x, w, cfg), X);
}

/// Diagonal RNN for one sequence X [T, d] with explicit forget values
/// `forget` [T, H, D] (diagonal of F_t per head).
template <class T>
std::pair<Tensor<T>, RecurrentState<T>> diag_rnn_forward(
    const Tensor<T>& X, const MixerWeights<T>& w, const MixerConfig& cfg,
    const Tensor<T>& forget, std::type_identity_t<std::optional<RecurrentState<T>>> state = std::nullopt) {
  NoGradScope<T> ng;
  check_mixer_shapes(w, cfg);
  const std::size_t H = cfg.n_heads, D = cfg.head_dim;
  if (X.rank() != 2 || X.dim(1) != cfg.d) throw ShapeError("diag_rnn_forward expects X [T, d]");
  const std::size_t Tn = X.dim(0);
  if (forget.shape() != Shape{Tn, H, D})
    throw ShapeError("forget gates must be [T, H, D], got " + shape_str(forget.shape()));
  RecurrentState<T> st = state ? std::move(*state) : RecurrentState<T>::zeros(H, D);
  if (st.heads() != H) throw ShapeError("recurrent state head count mismatch");
  const Var<T> x = Var<T>::constant(X.reshaped({1, Tn, cfg.d}));
  const auto qkv = detail::rnn_qkv(x, w, cfg, st.pos);
  const Var<T> f = transpose12(Var<T>::constant(forget.reshaped({1, Tn, H, D})));
  const Tensor<T> S0 = st.S.reshaped({1, H, D, D});
  Tensor<T> S1;
  const Var<T> o = diag_scan(qkv.q, qkv.k, qkv.v, f, &S0, &S1);
  const Var<T> y = detail::mixer_output(o, x, w, cfg);
  st.S = std::move(S1).reshaped({H, D, D});
  st.pos += Tn;
  return {y.value().reshaped({Tn, cfg.d}), std::move(st)};
}

// ------------------------------------------------------------ decode steps

/// One attention step for token x [d] at position cache.pos(); appends its
/// key/value to the cache and returns the layer output [d].
template <class T>
Tensor<T> attention_decode_step(const Tensor<T>& x, const MixerWeights<T>& w,
                                const MixerConfig& cfg, const LogitsScaling& scaling,
                                KvCache<T>& cache) {
  NoGradScope<T> ng;
  const std::size_t g = cfg.group_size(), H = cfg.n_heads, Hk = cfg.n_kv_heads,
                    D = cfg.head_dim;
  if (cache.heads() != Hk || cache.head_dim() != D)
    throw ShapeError("kv cache layout does not match the attention layer");
  const std::size_t pos = cache.pos();
  const Var<T> xv = Var<T>::constant(x.reshaped({1, 1, cfg.d}));
  Var<T> q = detail::split_heads(matmul(xv, w.wq), H, D);
  Var<T> k = detail::split_heads(matmul(xv, w.wk), Hk, D);
  const Var<T> v = detail::split_heads(matmul(xv, w.wv), Hk, D);
  if (cfg.qk_norm) {
    q = rmsnorm(q, w.q_norm, T(cfg.norm_eps));
    k = rmsnorm(k, w.k_norm, T(cfg.norm_eps));
  }
  if (cfg.pe == PosEncoding::RoPE) {
    q = rope(q, pos, cfg.rope);
    k = rope(k, pos, cfg.rope);
  }
  cache.append(k.value().data(), v.value().data());
  const T qs = static_cast<T>(scaling.factor(pos) / std::sqrt(static_cast<double>(D)));
  const std::size_t S = cache.pos();
  Tensor<T> o({1, H, 1, D});
  std::vector<T> p(S);
  for (std::size_t h = 0; h < H; ++h) {
    const T* qh = q.value().data() + h * D;
    const T* K = cache.keys(h / g);
    const T* V = cache.values(h / g);
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t s = 0; s < S; ++s) {
      T dot = 0;
      for (std::size_t i = 0; i < D; ++i) dot += (qh[i] * qs) * K[s * D + i];
      p[s] = dot;
      m = std::max(m, dot);
    }
    T z = 0;
    for (std::size_t s = 0; s < S; ++s) z += (p[s] = std::exp(p[s] - m));
    const T inv = T(1) / z;
    T* oh = o.data() + h * D;
    for (std::size_t s = 0; s < S; ++s) {
      const T ps = p[s] * inv;
      for (std::size_t i = 0; i < D; ++i) oh[i] += ps * V[s * D + i];
    }
  }
  return detail::mixer_output(Var<T>::constant(std::move(o)), xv, w, cfg)
      .value()
      .reshaped({cfg.d});
}

/// One Lightning step for token x [d]; advances `state`.
template <class T>
Tensor<T> lightning_decode_step(const Tensor<T>& x, const MixerWeights<T>& w,
                                const MixerConfig& cfg, const GammaVector& gammas,
                                RecurrentState<T>& state) {
  auto [y, st] = lightning_forward_recurrent(x.reshaped({1, cfg.d}), w, cfg, gammas,
                                             std::move(state));
  state = std::move(st);
  return std::move(y).reshaped({cfg.d});
}

/// One diagonal-RNN step for token x [d] with gates from W_f; advances `state`.
template <class T>
Tensor<T> diag_rnn_decode_step(const Tensor<T>& x, const MixerWeights<T>& w,
                               const MixerConfig& cfg, RecurrentState<T>& state) {
  NoGradScope<T> ng;
  const Var<T> xv = Var<T>::constant(x.reshaped({1, 1, cfg.d}));
  const Tensor<T> f = diag_forget_gates(xv, w, cfg).value().reshaped({1, cfg.n_heads, cfg.head_dim});
  auto [y, st] = diag_rnn_forward(x.reshaped({1, cfg.d}), w, cfg, f, std::move(state));
  state = std::move(st);
  return std::move(y).reshaped({cfg.d});
}

// ---------------------------------------------------------------- GQA -> MHA

/// Gives every query head its own copy of the KV projection of head ⌊i/g⌋.
/// The returned weights produce the same layer output as the GQA original.
template <class T>
std::pair<MixerWeights<T>, MixerConfig> gqa_to_mha_clone(const MixerWeights<T>& w,
                                                         const MixerConfig& cfg, std::size_t g) {
  if (g == 0 || cfg.n_kv_heads * g != cfg.n_heads)
    throw ConfigError("group size " + std::to_string(g) + " does not match layout of " +
                      std::to_string(cfg.n_heads) + " query / " + std::to_string(cfg.n_kv_heads) +
                      " kv heads");
  MixerWeights<T> out = w.deep_copy();
  MixerConfig oc = cfg;
  oc.n_kv_heads = cfg.n_heads;
  if (g == 1) return {out, oc};
  const std::size_t d = cfg.d, D = cfg.head_dim, Hk = cfg.n_kv_heads, H = cfg.n_heads;
  auto expand = [&](const Var<T>& src) {
    const Tensor<T>& s = src.value();
    Tensor<T> t({d, H * D});
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t h = 0; h < H; ++h)
        std::copy_n(s.data() + r * Hk * D + (h / g) * D, D, t.data() + r * H * D + h * D);
    return Var<T>(std::move(t), src.requires_grad());
  };
  out.wk = expand(w.wk);
  out.wv = expand(w.wv);
  return {out, oc};
}

}  // namespace hybridkit
