// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "hybridkit/model.hpp"
#include "test_util.hpp"

using namespace hybridkit;

namespace {

ModelConfig tiny(std::size_t L, std::vector<std::size_t> attn, std::size_t vocab = 37) {
  ModelConfig c = ModelConfig::hypenet(L);
  c.attn_layers = std::move(attn);
  c.d = 12;
  c.head_dim = 4;
  c.n_heads = 3;
  c.n_kv_heads = 1;
  c.ffn = 20;
  c.vocab = vocab;
  c.rope = {50000.0, 4};
  c.chunk = 5;
  c.init_std = 0.3;
  return c;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

// Straight-line rmsnorm over rows of a [T, d] tensor.
Tensor<double> rms_rows(const Tensor<double>& x, const Tensor<double>& g, double eps) {
  const std::size_t R = x.dim(0), d = x.dim(1);
  Tensor<double> y({R, d});
  for (std::size_t r = 0; r < R; ++r) {
    double ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += x.at(r, j) * x.at(r, j);
    const double inv = 1.0 / std::sqrt(ms / d + eps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = x.at(r, j) * inv * g[j];
  }
  return y;
}

Tensor<double> mlp_ref(const LayerWeights<double>& lw, const Tensor<double>& x) {
  const std::size_t R = x.dim(0), d = x.dim(1), F = lw.w_gate.shape()[1];
  Tensor<double> y({R, d});
  for (std::size_t r = 0; r < R; ++r) {
    std::vector<double> hcur(F);
    for (std::size_t f = 0; f < F; ++f) {
      double a = 0, b = 0;
      for (std::size_t j = 0; j < d; ++j) {
        a += x.at(r, j) * lw.w_gate.value().at(j, f);
        b += x.at(r, j) * lw.w_up.value().at(j, f);
      }
      hcur[f] = a / (1.0 + std::exp(-a)) * b;
    }
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0;
      for (std::size_t f = 0; f < F; ++f) s += hcur[f] * lw.w_down.value().at(f, j);
      y[r * d + j] = s;
    }
  }
  return y;
}

Tensor<double> unembed_ref(const Tensor<double>& x, const Tensor<double>& E) {
  const std::size_t R = x.dim(0), d = x.dim(1), V = E.dim(0);
  Tensor<double> y({R, V});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += x.at(r, j) * E.at(v, j);
      y[r * V + v] = s;
    }
  return y;
}

Tensor<double> embed_ref(const Tensor<double>& E, const std::vector<int>& ids) {
  const std::size_t d = E.dim(1);
  Tensor<double> x({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(E.data() + ids[i] * d, d, x.data() + i * d);
  return x;
}

Tensor<double> add_t(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

}  // namespace

TEST_CASE("empty stack is norm then tied unembedding", "[model]") {
  Rng rng(1);
  auto cfg = tiny(0, {});
  auto m = Model<double>::random(cfg, rng);
  const std::vector<int> ids{3, 1, 4, 1, 5};
  const auto E = m.embedding().value();
  const auto ref = unembed_ref(rms_rows(embed_ref(E, ids), m.final_gain().value(), 1e-6), E);
  CHECK(max_abs_diff(logits(m, ids), ref) < 1e-12);
}

TEST_CASE("rope rnn layer makes the model order sensitive", "[model]") {
  Rng rng(2);
  auto cfg = tiny(1, {});
  auto m = Model<double>::random(cfg, rng);
  const auto a = logits(m, {5, 6, 7, 8});
  const auto b = logits(m, {5, 7, 6, 8});
  double diff = 0;
  for (std::size_t v = 0; v < cfg.vocab; ++v) diff = std::max(diff, std::abs(a[3 * cfg.vocab + v] - b[3 * cfg.vocab + v]));
  CHECK(diff > 1e-6);
}

TEST_CASE("two-layer model matches a composed reference", "[model]") {
  Rng rng(3);
  auto cfg = tiny(2, {1});
  cfg.scaling = LogitsScaling::log_base(3.0);
  auto m = Model<double>::random(cfg, rng);
  const auto ids = random_tokens(rng, 11, cfg.vocab);
  Tensor<double> x = embed_ref(m.embedding().value(), ids);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& lw = m.layer(l);
    const auto n = rms_rows(x, lw.pre_mixer_gain.value(), 1e-6);
    Tensor<double> y = l == 0 ? lightning_forward_recurrent(n, lw.mixer, cfg.mixer_config(0), gamma_slopes(3)).first
                              : attention_forward(Var<double>::constant(n), lw.mixer, cfg.mixer_config(1), cfg.scaling)
                                    .value();
    const auto h = add_t(x, y);
    x = add_t(h, mlp_ref(lw, rms_rows(h, lw.pre_mlp_gain.value(), 1e-6)));
  }
  const auto ref = unembed_ref(rms_rows(x, m.final_gain().value(), 1e-6), m.embedding().value());
  CHECK(max_rel_diff(logits(m, ids), ref) < 1e-8);
}

TEST_CASE("forward rejects out-of-range ids", "[model][errors]") {
  Rng rng(4);
  auto m = Model<double>::random(tiny(2, {0}), rng);
  CHECK_THROWS_AS(logits(m, {1, 37}), Error);
  CHECK_THROWS_AS(logits(m, {-1}), Error);
}

TEST_CASE("forward capture observes without perturbing", "[model][capture]") {
  Rng rng(5);
  auto cfg = tiny(3, {1});
  auto m = Model<double>::random(cfg, rng);
  const auto ids = random_tokens(rng, 9, cfg.vocab);
  auto [x0, y0] = forward_capture(m, ids, 0);
  const auto e = embed_ref(m.embedding().value(), ids);
  CHECK(max_abs_diff(x0.reshaped({9, cfg.d}), rms_rows(e, m.layer(0).pre_mixer_gain.value(), 1e-6)) < 1e-14);

  std::vector<LayerCapture<double>> cap;
  ForwardOptions<double> o;
  o.capture = &cap;
  const auto with = forward(m, ids, 1, 9, o).value();
  const auto without = forward(m, ids, 1, 9).value();
  CHECK(with == without);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto h = cap[l].h.reshaped({9, cfg.d});
    const auto& lw = m.layer(l);
    const auto ref = mlp_ref(lw, rms_rows(h, lw.pre_mlp_gain.value(), 1e-6));
    Tensor<double> diff({9, cfg.d});
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = cap[l].x_out[i] - cap[l].h[i];
    CHECK(max_abs_diff(diff, ref) < 1e-10);
  }
  CHECK_THROWS_AS(forward_capture(m, ids, 3), Error);
}

TEST_CASE("tied embeddings share storage", "[model]") {
  Rng rng(6);
  auto m = Model<double>::random(tiny(1, {0}), rng);
  CHECK(m.embedding().same_node(m.unembedding()));
  const auto before = logits(m, {1, 2});
  const_cast<Var<double>&>(m.embedding()).mutable_value()[0] += 1.0;
  CHECK(m.unembedding().value()[0] == m.embedding().value()[0]);
  CHECK_FALSE(logits(m, {1, 2}) == before);
}

TEST_CASE("shared prefixes give identical logits", "[model][property]") {
  Rng rng(7);
  auto cfg = tiny(4, {0, 2});
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  cfg.d = 4;
  cfg.attn_pe = PosEncoding::NoPE;
  cfg.rnn_pe = PosEncoding::NoPE;
  auto m = Model<double>::random(cfg, rng);
  auto a = random_tokens(rng, 20, cfg.vocab);
  auto b = a;
  for (std::size_t i = 12; i < 20; ++i) b[i] = (b[i] + 1 + i) % cfg.vocab;
  const auto la = logits(m, a), lb = logits(m, b);
  for (std::size_t i = 0; i < 12 * cfg.vocab; ++i) REQUIRE(la[i] == lb[i]);
  // Same with the default positional modes and a batch.
  auto m2 = Model<double>::random(tiny(4, {0, 2}), rng);
  std::vector<int> ab(a);
  ab.insert(ab.end(), b.begin(), b.end());
  const auto l2 = forward(m2, ab, 2, 20).value();
  for (std::size_t i = 0; i < 12 * 37; ++i) REQUIRE(l2[i] == l2[20 * 37 + i]);
}

TEST_CASE("decode matches the full forward", "[model][decode][property]") {
  Rng rng(8);
  for (MixerKind kind : {MixerKind::Lightning, MixerKind::DiagRNN}) {
    auto cfg = tiny(4, {0, 3});
    cfg.rnn_kind = kind;
    cfg.scaling = LogitsScaling::log_base(2.0);
    cfg.chunk = 7;
    auto m = Model<double>::random(cfg, rng);
    for (std::size_t len : {1, 2, 13, 64, 128}) {
      const auto ids = random_tokens(rng, len, cfg.vocab);
      const auto full = logits(m, ids);
      auto s = DecodeSession<double>::empty(cfg);
      for (std::size_t t = 0; t < len; ++t) {
        const auto lg = decode_step(m, s, ids[t]);
        for (std::size_t v = 0; v < cfg.vocab; ++v)
          REQUIRE(std::abs(lg[v] - full[t * cfg.vocab + v]) < 1e-8 * (1 + std::abs(full[t * cfg.vocab + v])));
      }
      CHECK(s.pos == len);
    }
  }
}

TEST_CASE("first decode step equals a one-token forward", "[model][decode]") {
  Rng rng(9);
  auto cfg = tiny(2, {1});
  auto m = Model<double>::random(cfg, rng);
  auto s = DecodeSession<double>::empty(cfg);
  const auto a = decode_step(m, s, 17);
  const auto b = logits(m, {17}).reshaped({cfg.vocab});
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("decode applies scaling at absolute positions", "[model][decode]") {
  Rng rng(10);
  auto cfg = tiny(2, {0});
  cfg.init_std = 0.8;
  auto m = Model<double>::random(cfg, rng);
  const auto ids = random_tokens(rng, 40, cfg.vocab);
  const auto sc = LogitsScaling::log_base(1.5);
  const auto full = logits(m, ids, sc);
  const auto plain = logits(m, ids);
  CHECK(max_abs_diff(full, plain) > 1e-6);
  DecodeSession<double> s;
  std::vector<int> head(ids.begin(), ids.begin() + 25);
  prefill(m, head, s, sc);
  for (std::size_t t = 25; t < 40; ++t) {
    const auto lg = decode_step(m, s, ids[t], sc);
    for (std::size_t v = 0; v < cfg.vocab; ++v) CHECK(std::abs(lg[v] - full[t * cfg.vocab + v]) < 1e-10);
  }
}

TEST_CASE("greedy decode equals repeated full forwards", "[model][decode]") {
  Rng rng(11);
  auto cfg = tiny(4, {0});
  cfg.init_std = 0.5;
  auto m = Model<double>::random(cfg, rng);
  const std::vector<int> prompt{1, 2, 3, 4, 5};
  const auto fast = greedy_decode(m, prompt, 32);
  std::vector<int> seq = prompt, slow;
  for (int i = 0; i < 32; ++i) {
    const auto lg = logits(m, seq);
    const double* row = lg.data() + (seq.size() - 1) * cfg.vocab;
    const int next = static_cast<int>(std::max_element(row, row + cfg.vocab) - row);
    slow.push_back(next);
    seq.push_back(next);
  }
  CHECK(fast == slow);
}

TEST_CASE("decode session desync is an error", "[model][decode][errors]") {
  Rng rng(12);
  auto cfg = tiny(2, {0});
  auto m = Model<double>::random(cfg, rng);
  auto s = DecodeSession<double>::empty(cfg);
  decode_step(m, s, 1);
  s.pos = 5;
  CHECK_THROWS_AS(decode_step(m, s, 1), Error);
  auto s2 = DecodeSession<double>::empty(cfg);
  s2.states[1]->pos = 3;
  CHECK_THROWS_AS(decode_step(m, s2, 1), Error);
}

TEST_CASE("hybrid from teacher with every layer kept", "[model][conversion]") {
  Rng rng(13);
  ModelConfig tc = tiny(3, {0, 1, 2});
  tc.attn_pe = PosEncoding::RoPE;
  tc.attn_gate = false;
  auto teacher = Model<double>::random(tc, rng);
  auto h = init_hybrid_from_teacher(teacher, {0, 1, 2}, rng);
  const std::vector<int> ids{4, 8, 15, 16, 23, 4, 2};
  CHECK(logits(h, ids) == logits(teacher, ids));
  auto h2 = prepare_stage2(h, rng);
  CHECK(h2.config().attn_pe == PosEncoding::NoPE);
  for (const auto& lw : h2.layers()) {
    CHECK(lw.mixer.wz.defined());
    CHECK(lw.mixer.wq.value() == teacher.layer(&lw - &h2.layers()[0]).mixer.wq.value());
  }
  CHECK(h2.parameter_count() - teacher.parameter_count() == 3 * (tc.d * tc.n_heads * tc.head_dim + tc.head_dim));
}

TEST_CASE("converted rnn layers carry teacher projections", "[model][conversion]") {
  Rng rng(14);
  ModelConfig tc = tiny(4, {0, 1, 2, 3});
  tc.attn_pe = PosEncoding::RoPE;
  tc.attn_gate = false;
  auto teacher = Model<double>::random(tc, rng);
  const auto snapshot = teacher.deep_copy();
  auto h = init_hybrid_from_teacher(teacher, {2}, rng);
  CHECK(h.config().pattern() == "LLAL");
  for (std::size_t l : {0, 1, 3}) {
    CHECK(h.layer(l).mixer.wq.value() == teacher.layer(l).mixer.wq.value());
    CHECK(h.layer(l).mixer.wo.value() == teacher.layer(l).mixer.wo.value());
    CHECK(h.layer(l).mixer.q_norm.value() == teacher.layer(l).mixer.q_norm.value());
    CHECK(h.layer(l).mixer.wk.shape() == Shape{tc.d, tc.n_heads * tc.head_dim});
  }
  CHECK_FALSE(h.layer(0).mixer.wq.same_node(teacher.layer(0).mixer.wq));
  // Per RNN layer: cloned K and V plus a fresh gate and output norm.
  const std::size_t g = tc.n_heads / tc.n_kv_heads;
  const std::size_t per = (g - 1) * tc.n_kv_heads * tc.d * tc.head_dim * 2 + tc.d * tc.n_heads * tc.head_dim + tc.head_dim;
  CHECK(h.parameter_count() - teacher.parameter_count() == 3 * per);
  CHECK(h.parameter_count() == parameter_count_formula(h.config()));
  CHECK(teacher.parameter_count() == parameter_count_formula(tc));
  // Conversion leaves the teacher untouched.
  for (std::size_t i = 0; i < teacher.parameters().size(); ++i)
    CHECK(teacher.parameters()[i].value() == snapshot.parameters()[i].value());
}

TEST_CASE("conversion rejects a teacher with rnn layers", "[model][conversion][errors]") {
  Rng rng(15);
  auto m = Model<double>::random(tiny(2, {0}), rng);
  CHECK_THROWS_AS(init_hybrid_from_teacher(m, {0}, rng), ConfigError);
}

TEST_CASE("layer kinds must follow the attention index set", "[model][errors]") {
  Rng rng(16);
  auto m = Model<double>::random(tiny(2, {0}), rng);
  auto cfg = m.config();
  cfg.attn_layers = {1};
  CHECK_THROWS_AS(m.set_config(cfg), ConfigError);
  cfg.attn_layers = {0, 5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  auto fresh = m.fresh_layer(1, rng);
  CHECK(fresh.kind == MixerKind::Lightning);
  auto swapped = m.with_layer(0, m.layer(1));
  CHECK(swapped.config().pattern() == "LL");
  CHECK(m.config().pattern() == "AL");
}

TEST_CASE("desk default sizes", "[model]") {
  auto c = ModelConfig::hypenet(8);
  CHECK(c.attn_layers == std::vector<std::size_t>{0, 4});
  CHECK(c.n_attention() == 8 / 4);
  CHECK(c.pattern() == "ALLLALLL");
  CHECK(c.attn_pe == PosEncoding::NoPE);
  CHECK(c.rnn_pe == PosEncoding::RoPE);
  Rng rng(17);
  auto m = Model<float>::random(c, rng);
  CHECK(m.parameter_count() == parameter_count_formula(c));
}
