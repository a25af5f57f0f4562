// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

#include "hybridkit/hybridkit.hpp"

using namespace hybridkit;

int main() {
  tune_allocator();
  ModelConfig c = ModelConfig::hypenet(4);
  c.d = 64;
  c.head_dim = 32;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.ffn = 192;
  c.rope = {50000.0, 32};
  Rng rng(1);
  Model<float> m = Model<float>::random(c, rng);
  std::printf("layers %s, %zu parameters\n", c.pattern().c_str(), m.parameter_count());

  const Corpus corpus(CorpusSpec{});
  TrainConfig t;
  t.steps = 60;
  t.warmup_steps = 10;
  t.context_len = 128;
  t.batch_size = 4;
  t.lr_max = 3e-3;
  const StageReport r = train_lm(m, corpus, t);
  std::printf("loss %.3f -> %.3f in %.1fs\n", r.steps.front().loss, r.steps.back().loss, r.wall_seconds);

  NiahSpec niah;
  niah.n_samples = 20;
  for (const auto& row : length_sweep(ModelScorer<float>(m), {128, 256}, niah)) {
    const auto [lo, hi] = binomial_interval(row.n_samples, row.value);
    std::printf("niah@%zu %zu/%zu correct (99%% band %zu..%zu)\n", row.context_len, row.correct, row.n_samples, lo, hi);
  }
  save_checkpoint("quickstart.ckpt", m, Json{{"train_context", t.context_len}});
}
