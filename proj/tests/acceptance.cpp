// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hybridkit/hybridkit.hpp"

using namespace hybridkit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

// ------------------------------------------------------------ model sizes

/// Hybrid of about ten million parameters: 8 layers, attention at 0 and 4.
ModelConfig hybrid10m() {
  ModelConfig c = ModelConfig::hypenet(8);
  c.ffn = 1280;
  return c;
}

/// Attention-only model with the same dimensions as hybrid10m.
ModelConfig transformer10m() {
  ModelConfig c = hybrid10m();
  c.attn_layers = {0, 1, 2, 3, 4, 5, 6, 7};
  return c;
}

/// Reduced width for the training criteria on a single CPU core.
ModelConfig compact(bool hybrid) {
  ModelConfig c = hybrid ? ModelConfig::hypenet(8) : ModelConfig::transformer(8);
  c.d = 128;
  c.head_dim = 64;
  c.n_heads = 2;
  c.n_kv_heads = hybrid ? 2 : 1;
  c.ffn = 384;
  c.rope = {50000.0, 64};
  return c;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

// --------------------------------------------------------------- 1: gamma

Outcome gamma_table(const fs::path&) {
  const double table[32] = {0.4313237,  0.4930687,  0.5517813,  0.60653067, 0.6567524,  0.7021885,  0.74281985,
                            0.7788008,  0.81040263, 0.83796686, 0.86186993, 0.8824969,  0.9002237,  0.91540533,
                            0.9283695,  0.9394131,  0.94880116, 0.95676816, 0.96351933, 0.9692332,  0.97406423,
                            0.97814524, 0.9815902,  0.9844964,  0.98694694, 0.98901224, 0.99075234, 0.99221796,
                            0.993452,   0.994491,   0.99536544, 0.9961014};
  const auto g = gamma_slopes(32);
  if (g.size() != 32) return {false, fmt("gamma_slopes(32) returned %zu values", g.size())};
  double worst = 0;
  for (std::size_t h = 0; h < 32; ++h) worst = std::max(worst, std::abs(g[h] - table[h]));
  return {worst < 1e-6, fmt("max abs error %.3g over 32 heads (limit 1e-6)", worst)};
}

// ------------------------------------------------- 2: lightning equivalence

Outcome lightning_equivalence(const fs::path&) {
  MixerConfig c;
  c.d = 32;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.head_dim = 8;
  c.rope = {50000.0, 8};
  c.pe = PosEncoding::RoPE;
  const auto g = gamma_slopes(c.n_heads);
  double worst = 0;
  std::size_t runs = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    const auto w = init_mixer_weights<double>(c, MixerKind::Lightning, rng, 0.3);
    for (std::size_t T : {16, 64, 256}) {
      const auto X = randn<double>({T, c.d}, rng, 1.0);
      const auto ref = lightning_forward_recurrent(X, w, c, g).first;
      for (std::size_t chunk : {std::size_t(1), std::size_t(2), std::size_t(16), std::size_t(64), T}) {
        const auto y = lightning_forward_chunked(Var<double>::constant(X), w, c, g, chunk).value();
        worst = std::max(worst, max_rel_diff(y, ref));
        ++runs;
      }
    }
  }
  return {worst < 1e-5, fmt("%zu seed/length/chunk runs, max relative error %.3g (limit 1e-5)", runs, worst)};
}

// ----------------------------------------------------------- 3: gradients

template <class T>
Var<T> weighted(const Var<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Var<T>::constant(randn<T>(y.shape(), rng, 1.0))));
}

Outcome gradient_suite(const fs::path&) {
  struct Check {
    std::string name;
    std::function<Var<double>()> f;
    std::vector<Var<double>> params;
    double step;
  };
  double worst = 0;
  std::string worst_name;
  std::size_t n_checks = 0;
  std::set<std::string> names;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(300 + seed);
    auto P = [&](Shape s, double sd = 1.0) { return Var<double>::parameter(randn<double>(std::move(s), rng, sd)); };
    auto a = P({2, 3, 4}), b4 = P({4}), b = P({2, 3, 4}), m1 = P({2, 3, 5}), m2 = P({2, 5, 4}), w = P({6, 5});
    auto gain = P({4}), q4 = P({2, 2, 3, 4}), sq = P({3, 5});
    const Tensor<double> target = randn<double>({2, 3, 4}, rng, 1.0);
    const Tensor<double> teacher_logits = randn<double>({2, 3, 4}, rng, 2.0);
    auto q = P({1, 2, 3, 4}), k = P({1, 2, 5, 4}), v = P({1, 2, 5, 4});
    auto f = Var<double>::parameter(rand_uniform<double>({1, 2, 5, 4}, rng, 0.2, 0.9));

    MixerConfig ac;
    ac.d = 8;
    ac.n_heads = 4;
    ac.n_kv_heads = 2;
    ac.head_dim = 4;
    ac.rope = {50000.0, 4};
    auto aw = init_mixer_weights<double>(ac, MixerKind::Attention, rng, 0.5);
    MixerConfig rc = ac;
    rc.n_heads = rc.n_kv_heads = 2;
    rc.pe = PosEncoding::RoPE;
    auto lw = init_mixer_weights<double>(rc, MixerKind::Lightning, rng, 0.5);
    auto dw = init_mixer_weights<double>(rc, MixerKind::DiagRNN, rng, 0.5);
    auto X = P({2, 5, 8});
    auto with = [&](const MixerWeights<double>& mw) {
      std::vector<Var<double>> ps{X};
      for (auto& [n, p] : mw.named()) ps.push_back(p);
      return ps;
    };
    const auto gl = gamma_slopes(2);

    std::vector<Check> checks{
        {"add", [&] { return add(a, b4); }, {a, b4}, 1e-5},
        {"sub", [&] { return sub(a, b); }, {a, b}, 1e-5},
        {"mul", [&] { return mul(a, b4); }, {a, b4}, 1e-5},
        {"scale", [&] { return scale(a, 0.7); }, {a}, 1e-5},
        {"sigmoid", [&] { return sigmoid(a); }, {a}, 1e-5},
        {"silu", [&] { return silu(a); }, {a}, 1e-5},
        {"sigmoid_pow", [&] { return sigmoid_pow(a, 1.0 / 16); }, {a}, 1e-5},
        {"matmul", [&] { return matmul(m1, m2); }, {m1, m2}, 1e-5},
        {"matmul_nt", [&] { return matmul_nt(m1, w); }, {m1, w}, 1e-5},
        {"matmul_tn", [&] { return matmul_tn(m1, m1); }, {m1}, 1e-5},
        {"softmax", [&] { return softmax_rows(a); }, {a}, 1e-5},
        {"causal_softmax", [&] { return softmax_rows(sq, true); }, {sq}, 1e-5},
        {"rmsnorm", [&] { return rmsnorm(a, gain, 1e-6); }, {a, gain}, 1e-5},
        {"reshape", [&] { return reshape(a, {6, 4}); }, {a}, 1e-5},
        {"transpose12", [&] { return transpose12(q4); }, {q4}, 1e-5},
        {"repeat_heads", [&] { return repeat_heads(q4, 3); }, {q4}, 1e-5},
        {"slice", [&] { return slice(a, 1, 1, 2); }, {a}, 1e-5},
        {"concat", [&] { return concat<double>({a, b}, 2); }, {a, b}, 1e-5},
        {"embedding", [&] { return embedding(sq, {2, 0, 2, 1}, {2, 2}); }, {sq}, 1e-5},
        {"mean", [&] { return mean(a); }, {a}, 1e-5},
        {"mse", [&] { return mse(a, target); }, {a}, 1e-5},
        {"cross_entropy", [&] { return cross_entropy(a, {0, 3, -1, 2, 1, 1}); }, {a}, 1e-5},
        {"kl_divergence", [&] { return kl_divergence(teacher_logits, a); }, {a}, 1e-5},
        {"causal_attention", [&] { return causal_attention(q, k, v); }, {q, k, v}, 1e-5},
        {"diag_scan", [&] { return diag_scan(k, v, k, f); }, {k, v, f}, 1e-5},
        {"attention_forward", [&] { return attention_forward(X, aw, ac, LogitsScaling::log_base(4.0)); }, with(aw),
         1e-4},
        {"lightning_forward", [&] { return lightning_forward_chunked(X, lw, rc, gl, 2); }, with(lw), 1e-6},
        {"diag_rnn_forward", [&] { return diag_rnn_forward_parallel(X, dw, rc); }, with(dw), 1e-6},
    };
    for (auto& c : checks) {
      const double e = finite_diff_check_params<double>([&] { return weighted(c.f(), 77 + seed); }, c.params, c.step);
      names.insert(c.name);
      ++n_checks;
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  return {worst < 1e-4, fmt("%zu ops x 5 instances (%zu checks), worst relative error %.3g (%s; limit 1e-4)", names.size(), n_checks, worst,
                            worst_name.c_str())};
}

// --------------------------------------------------- 4: decode equivalence

Outcome decode_equivalence(const fs::path&) {
  ModelConfig c = hybrid10m();
  c.scaling = LogitsScaling::log_base(500.0);
  Rng rng(44);
  const auto m = Model<double>::random(c, rng);
  double worst = 0;
  std::size_t compared = 0;
  for (int p = 0; p < 10; ++p) {
    const std::size_t len = 1 + rng.below(128);
    const auto ids = random_tokens(rng, len, c.vocab);
    const auto full = logits(m, ids);
    auto s = DecodeSession<double>::empty(c);
    for (std::size_t t = 0; t < len; ++t) {
      const auto lg = decode_step(m, s, ids[t]);
      for (std::size_t v = 0; v < c.vocab; ++v) {
        const double ref = full[t * c.vocab + v];
        worst = std::max(worst, std::abs(lg[v] - ref) / (1.0 + std::abs(ref)));
        ++compared;
      }
    }
  }
  return {worst < 1e-8, fmt("%zu-parameter hybrid, 10 prompts, %zu logits, max error %.3g (limit 1e-8)",
                            m.parameter_count(), compared, worst)};
}

// --------------------------------------------------- 5: selection oracle

Outcome selection_oracle(const fs::path&) {
  Rng rng(55);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t L = 1 + rng.below(36);
    std::vector<std::pair<double, double>> rc(L);
    for (auto& [r, c] : rc) {
      r = static_cast<double>(rng.below(6)) / 5.0;
      c = static_cast<double>(rng.below(6)) / 5.0;
    }
    double rmax = 0, cmax = 0;
    for (const auto& [r, c] : rc) rmax = std::max(rmax, r), cmax = std::max(cmax, c);
    std::vector<double> s(L);
    for (std::size_t i = 0; i < L; ++i) s[i] = (rmax - rc[i].first) / (cmax - rc[i].second + 1e-6);
    const std::size_t k = 1 + rng.below(L);
    std::vector<bool> used(L, false);
    std::vector<std::size_t> chosen;
    for (std::size_t n = 0; n < k; ++n) {
      std::size_t best = L;
      for (std::size_t i = 0; i < L; ++i)
        if (!used[i] && (best == L || s[i] > s[best])) best = i;
      used[best] = true;
      chosen.push_back(best);
    }
    std::sort(chosen.begin(), chosen.end());
    if (layer_importance(rc) != s || select_attention_layers(s, static_cast<long long>(k)) != chosen) ++mismatches;
  }

  // 28-layer fixture: scores chosen so the importance order starts 3, 21, 2, 9, 25, 6, 8.
  const std::vector<std::size_t> ranked{3, 21, 2, 9, 25, 6, 8};
  std::vector<std::pair<double, double>> rc(28, {0.99, 0.5});
  rc[0] = {1.0, 0.6};
  for (std::size_t i = 0; i < ranked.size(); ++i) rc[ranked[i]].first = 0.5 + 0.05 * static_cast<double>(i);
  const auto s28 = layer_importance(rc);
  const auto got = select_attention_layers(s28, 7);
  const auto order = importance_order(s28);
  const std::set<std::size_t> boxed(ranked.begin(), ranked.end());
  const bool fixture = std::set<std::size_t>(got.begin(), got.end()) == boxed &&
                       std::vector<std::size_t>(order.begin(), order.begin() + 7) == ranked;
  return {mismatches == 0 && fixture, fmt("%zu/1000 mismatches against brute force; 28-layer fixture %s", mismatches,
                                          fixture ? "selects {2,3,6,8,9,21,25}" : "differs")};
}

// ------------------------------------------------------ 6: GQA -> MHA clone

Outcome gqa_clone(const fs::path&) {
  const ModelConfig tc = transformer10m();
  Rng rng(66);
  const auto gqa = Model<double>::random(tc, rng);
  const std::size_t g = tc.n_heads / tc.n_kv_heads;
  ModelConfig mc = tc;
  mc.n_kv_heads = tc.n_heads;
  std::vector<LayerWeights<double>> layers;
  for (std::size_t l = 0; l < tc.n_layers; ++l) {
    LayerWeights<double> lw = gqa.layer(l);
    lw.mixer = gqa_to_mha_clone(lw.mixer, tc.mixer_config(l), g).first;
    layers.push_back(std::move(lw));
  }
  Model<double> mha;
  mha.set_embedding(gqa.embedding());
  mha.set_final_gain(gqa.final_gain());
  mha.set_layers(std::move(layers));
  mha.set_config(mc);
  std::size_t identical = 0;
  for (int i = 0; i < 10; ++i) {
    const auto ids = random_tokens(rng, 8 + rng.below(57), tc.vocab);
    if (logits(gqa, ids) == logits(mha, ids)) ++identical;
  }
  const std::size_t growth = mha.parameter_count() - gqa.parameter_count();
  const std::size_t expect = tc.n_layers * (g - 1) * tc.n_kv_heads * tc.d * tc.head_dim * 2;
  const bool formula = growth == expect && mha.parameter_count() == parameter_count_formula(mc);
  return {identical == 10 && formula,
          fmt("%zu/10 inputs bit-identical; parameter growth %zu, closed form %zu", identical, growth, expect)};
}

// --------------------------------------------------- 7: HALO conversion

constexpr std::size_t kTeacherSteps = 500;
constexpr std::size_t kBatch = 8;
constexpr std::size_t kContext = 256;

TrainConfig train_cfg(std::size_t steps, double lr_max, std::size_t ctx, std::size_t batch, std::uint64_t seed,
                      std::size_t warmup) {
  TrainConfig t;
  t.steps = steps;
  t.lr_max = lr_max;
  t.lr_min = lr_max / 10;
  t.context_len = ctx;
  t.batch_size = batch;
  t.warmup_steps = warmup;
  t.seed = seed;
  return t;
}

Outcome halo_smoke(const fs::path& out) {
  CorpusSpec cs;
  cs.niah_fraction = 0.5;
  const Corpus corpus(cs);
  Rng rng(77);
  Model<float> teacher = Model<float>::random(compact(false), rng);
  const auto tr = train_lm(teacher, corpus, train_cfg(kTeacherSteps, 3e-3, kContext, kBatch, 7, 50));
  const std::string before = checkpoint_bytes(teacher);

  HaloConfig hc;
  hc.stage1 = train_cfg(200, 3e-3, kContext, 4, 71, 10);
  hc.stage2 = train_cfg(150, 1e-3, kContext, 4, 72, 10);
  hc.stage3 = train_cfg(20, 1e-4, 2 * kContext, 2, 73, 0);
  hc.stage3.schedule = Schedule::Constant;
  hc.rc.niah.context_len = 2 * kContext;
  hc.rc.niah.n_samples = 40;
  hc.rc.csr.n_samples = 100;
  hc.seed = 70;
  const auto r = run_halo(teacher, corpus, hc);

  std::ofstream rep(out / "halo_stage1.tsv");
  rep << "layer\tinitial_mse\tfinal_mse\tratio\n";
  double worst = 0;
  for (std::size_t l = 0; l < r.stage1.layers.size(); ++l) {
    const double ratio = r.stage1.final_mse[l] / r.stage1.initial_mse[l];
    worst = std::max(worst, ratio);
    rep << l << '\t' << r.stage1.initial_mse[l] << '\t' << r.stage1.final_mse[l] << '\t' << ratio << '\n';
  }
  std::ofstream reports(out / "halo_reports.jsonl");
  for (const auto& s : r.stage1.reports) s.write_jsonl(reports);
  r.stage2_report.write_jsonl(reports);
  r.stage3_report.write_jsonl(reports);

  const double kl0 = r.stage2_report.summary["initial_kl"].get<double>();
  const double kl1 = r.stage2_report.summary["final_kl"].get<double>();
  const bool a = worst <= 0.1;
  const bool b = kl1 <= 0.5 * kl0;
  const bool c = checkpoint_bytes(teacher) == before;
  const std::size_t L = teacher.config().n_layers;
  const bool d = r.attn_layers.size() == L / 4 && r.final.config().attn_layers == r.attn_layers;
  std::string attn;
  for (std::size_t l : r.attn_layers) attn += (attn.empty() ? "" : ",") + std::to_string(l);
  return {a && b && c && d,
          fmt("teacher %zu params, %zu tokens, loss %.3f; (a) worst stage-1 MSE ratio %.4f (limit 0.1) %s; "
              "(b) KL %.4g -> %.4g, ratio %.3f (limit 0.5) %s; (c) teacher unchanged %s; (d) I_attn={%s} %s",
              teacher.parameter_count(), kTeacherSteps * kBatch * kContext, tr.summary["final_loss"].get<double>(),
              worst, a ? "ok" : "FAIL", kl0, kl1, kl1 / kl0, b ? "ok" : "FAIL", c ? "ok" : "FAIL", attn.c_str(),
              d ? "ok" : "FAIL")};
}

// ---------------------------------------------- 8: length generalization

constexpr std::size_t kNiahSteps = 1200;
constexpr std::size_t kNiahEvalSamples = 200;

Outcome hype_length_generalization(const fs::path& out) {
  CorpusSpec cs;
  cs.niah_fraction = 1.0;
  cs.needles = 16;
  cs.key_len = 1;
  cs.value_len = 1;
  cs.separator = false;
  const Corpus corpus(cs);
  auto train = [&](PosEncoding attn_pe) {
    ModelConfig c = compact(true);
    c.attn_pe = attn_pe;
    Rng rng(88);
    Model<float> m = Model<float>::random(c, rng);
    train_lm(m, corpus, train_cfg(kNiahSteps, 3e-3, kContext, kBatch, 8, 50));
    return m;
  };
  const Model<float> hype = train(PosEncoding::NoPE);
  const Model<float> rope = train(PosEncoding::RoPE);

  std::vector<std::vector<int>> docs;
  Rng drng(808);
  for (int i = 0; i < 8; ++i) docs.push_back(corpus.sequence(4 * kContext, drng));
  const ScaleBase fit = fit_model_scale_base(hype, docs, kContext, {100, 200, 300, 500, 1000, 2000, 5000}, 1);

  NiahSpec spec;
  spec.n_samples = kNiahEvalSamples;
  spec.seed = 8;
  spec.key_len = cs.key_len;
  spec.value_len = cs.value_len;
  spec.separator = cs.separator;
  const std::vector<std::size_t> lengths{kContext, 2 * kContext, 4 * kContext};
  const auto scaled = length_sweep(ModelScorer<float>(hype, LogitsScaling::log_base(fit.a)), lengths, spec, 1);
  const auto plain = length_sweep(ModelScorer<float>(hype, LogitsScaling::none()), lengths, spec, 1);
  const auto all_rope = length_sweep(ModelScorer<float>(rope, LogitsScaling::none()), lengths, spec, 1);
  std::ofstream tsv(out / "niah_length_generalization.tsv");
  tsv << "variant\tlength\taccuracy\n";
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    tsv << "hype_scaled\t" << lengths[i] << '\t' << scaled[i].value << '\n';
    tsv << "hype_unscaled\t" << lengths[i] << '\t' << plain[i].value << '\n';
    tsv << "all_rope\t" << lengths[i] << '\t' << all_rope[i].value << '\n';
  }
  const double s = scaled.back().value, p = plain.back().value, r = all_rope.back().value;
  const bool ok = s >= r + 0.10 && s >= p;
  return {ok, fmt("NIAH@%zu: HyPE+scaling(a=%g) %.3f, HyPE unscaled %.3f, all-RoPE %.3f; need >= all-RoPE+0.10 %s "
                  "and >= unscaled %s (NIAH@%zu: %.3f / %.3f / %.3f; chance %.4f)",
                  4 * kContext, fit.a, s, p, r, s >= r + 0.10 ? "ok" : "FAIL", s >= p ? "ok" : "FAIL", kContext,
                  scaled.front().value, plain.front().value, all_rope.front().value,
                  1.0 / static_cast<double>(cs.vocab - tok::kKeyValueLo))};
}

// ------------------------------------------------------- 9: decode scaling

Outcome efficiency_shape(const fs::path& out) {
  Rng rng(99);
  const auto hybrid = Model<float>::random(hybrid10m(), rng);
  const auto transformer = Model<float>::random(transformer10m(), rng);
  BenchOptions o;
  o.reps = 7;
  o.decode_tokens = 16;
  std::vector<BenchRow> rows;
  std::vector<double> ratio;
  bool kv_ok = true;
  double kv_frac = 0;
  for (std::size_t L : {1024, 4096, 16384}) {
    const auto h = bench_decode(hybrid, L, o);
    const auto t = bench_decode(transformer, L, o);
    rows.push_back(h);
    rows.push_back(t);
    rows[rows.size() - 2].mode = "decode_hybrid";
    rows.back().mode = "decode_transformer";
    ratio.push_back(t.median / h.median);
    kv_frac = double(h.kv_cache_bytes) / double(t.kv_cache_bytes);
    kv_ok = kv_ok && h.kv_cache_bytes * hybrid.config().n_layers ==
                         t.kv_cache_bytes * hybrid.config().attn_layers.size();
  }
  std::ofstream tsv(out / "decode_efficiency.tsv");
  write_bench_tsv(tsv, rows);
  const bool increasing = ratio[0] < ratio[1] && ratio[1] < ratio[2];
  return {increasing && kv_ok, fmt("time-per-token ratio transformer/hybrid %.2f, %.2f, %.2f at 1K/4K/16K (%s); "
                                   "KV bytes fraction %.4f, |I_attn|/L = %zu/%zu (%s)",
                                   ratio[0], ratio[1], ratio[2], increasing ? "increasing" : "NOT increasing",
                                   kv_frac, hybrid.config().attn_layers.size(), hybrid.config().n_layers,
                                   kv_ok ? "exact" : "MISMATCH")};
}

// ---------------------------------------------------------- 10: determinism

Outcome determinism(const fs::path& out) {
  const fs::path cfg = out / "determinism.json";
  std::ofstream(cfg) << R"({"model": {"arch": "hypenet", "n_layers": 4, "d": 64, "head_dim": 32, "n_heads": 2,
    "n_kv_heads": 2, "ffn": 192},
  "train": {"steps": 30, "warmup_steps": 5, "context_len": 128, "batch_size": 4, "lr_max": 0.003}})";
  std::vector<std::string> bytes;
  for (const char* name : {"det_a.ckpt", "det_b.ckpt"}) {
    const fs::path ck = out / name;
    const std::string cmd = std::string(HYBRIDKIT_CLI_PATH) + " --precision extended --seed 1234 train --config " +
                            cfg.string() + " --out " + ck.string() + " 2>/dev/null";
    const int st = std::system(cmd.c_str());
    if (!WIFEXITED(st) || WEXITSTATUS(st) != 0) return {false, "train exited with a failure status"};
    std::ifstream in(ck, std::ios::binary);
    bytes.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const bool same = !bytes[0].empty() && bytes[0] == bytes[1];
  const bool f64 = parse_checkpoint_header(bytes[0]).tensors.front().dtype == "f64";
  return {same && f64, fmt("two f64 runs, %zu bytes each, %s", bytes[0].size(), same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  fs::path out = "acceptance_artifacts";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      try {
        only.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--out DIR] [criterion ...]\n";
        return 2;
      }
    }
  }
  fs::create_directories(out);

  const std::vector<Criterion> all{
      {1, "gamma table", 1, gamma_table},
      {2, "recurrent/chunked equivalence", 30, lightning_equivalence},
      {3, "gradient suite", 120, gradient_suite},
      {4, "decode/prefill equivalence", 60, decode_equivalence},
      {5, "importance and selection oracle", 10, selection_oracle},
      {6, "GQA to MHA surgery", 30, gqa_clone},
      {7, "HALO smoke conversion", 1800, halo_smoke},
      {8, "HyPE length generalization", 3600, hype_length_generalization},
      {9, "decode efficiency shape", 600, efficiency_shape},
      {10, "training determinism", 300, determinism},
  };
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(out);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("criterion %d %s: %s: %s [%.1fs of %.0fs%s]\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                secs, c.budget_seconds, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
