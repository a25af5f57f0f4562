// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <string>

#include "hybridkit/hybridkit.hpp"

using namespace hybridkit;

int argmax(const float* row, std::size_t n) { return static_cast<int>(std::max_element(row, row + n) - row); }

int main(int argc, char** argv) {
  tune_allocator();
  Rng rng(2);
  Model<float> m = argc > 1 ? load_checkpoint<float>(argv[1]).model : Model<float>::random(ModelConfig::hypenet(8), rng);
  const ModelConfig& c = m.config();

  std::vector<int> prompt(200);
  for (auto& t : prompt) t = 16 + static_cast<int>(rng.below(240));
  DecodeSession<float> s;
  Tensor<float> lg = prefill(m, prompt, s);
  std::printf("prefilled %zu tokens: kv cache %zu bytes, recurrent state %zu bytes\n", s.pos, s.kv_cache_bytes(),
              s.recurrent_state_bytes());

  std::string out;
  int next = argmax(lg.data() + (prompt.size() - 1) * c.vocab, c.vocab);
  for (int i = 0; i < 16; ++i) {
    out += std::to_string(next) + " ";
    lg = decode_step(m, s, next);
    next = argmax(lg.data(), c.vocab);
  }
  std::printf("generated: %s\n", out.c_str());
  std::printf("after decode: pos %zu, kv cache %zu bytes (recurrent state unchanged at %zu bytes)\n", s.pos,
              s.kv_cache_bytes(), s.recurrent_state_bytes());
}
