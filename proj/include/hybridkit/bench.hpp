// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <ostream>
#include <string>
#include <vector>

#include "hybridkit/model.hpp"

namespace hybridkit {

struct BenchRow {
  std::string mode;     // "prefill" (seconds per sequence) or "decode" (seconds per token)
  std::size_t length = 0;
  double median = 0;
  std::vector<double> samples;
  std::size_t kv_cache_bytes = 0;
  std::size_t recurrent_state_bytes = 0;
};

struct BenchOptions {
  std::size_t reps = 5;          // timed repetitions after one warmup
  std::size_t decode_tokens = 8;  // tokens timed per decode repetition
  std::uint64_t seed = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Decode session positioned at `length` with random caches and states, as if
/// a prompt of that length had been prefilled.
template <class T>
DecodeSession<T> synthetic_session(const Model<T>& m, std::size_t length, Rng& rng) {
  const auto& c = m.config();
  auto s = DecodeSession<T>::empty(c);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (c.is_attention(l)) {
      auto& cache = *s.caches[l];
      cache.reserve(length + 64);
      const Tensor<T> k = randn<T>({c.n_kv_heads, length, c.head_dim}, rng, 1.0);
      const Tensor<T> v = randn<T>({c.n_kv_heads, length, c.head_dim}, rng, 1.0);
      cache.append_block(k.data(), v.data(), length);
    } else {
      s.states[l] = RecurrentState<T>{randn<T>({c.n_heads, c.head_dim, c.head_dim}, rng, 0.1), length};
    }
  }
  s.pos = length;
  return s;
}

/// Median wall time per generated token with `length` tokens of context.
template <class T>
BenchRow bench_decode(const Model<T>& m, std::size_t length, const BenchOptions& o = {}) {
  if (o.reps < 1 || o.decode_tokens < 1) throw ConfigError("bench: reps and decode_tokens must be >= 1");
  Rng rng(o.seed);
  const DecodeSession<T> base = synthetic_session(m, length, rng);
  BenchRow row{"decode", length, 0, {}, base.kv_cache_bytes(), base.recurrent_state_bytes()};
  const int tok = static_cast<int>(rng.below(m.config().vocab));
  for (std::size_t r = 0; r <= o.reps; ++r) {
    DecodeSession<T> s = base;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < o.decode_tokens; ++i) decode_step(m, s, tok);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r > 0) row.samples.push_back(dt / static_cast<double>(o.decode_tokens));
  }
  row.median = median_of(row.samples);
  return row;
}

/// Median wall time of a full prompt forward of `length` tokens.
template <class T>
BenchRow bench_prefill(const Model<T>& m, std::size_t length, const BenchOptions& o = {}) {
  if (o.reps < 1) throw ConfigError("bench: reps must be >= 1");
  Rng rng(o.seed);
  std::vector<int> prompt(length);
  for (auto& t : prompt) t = static_cast<int>(rng.below(m.config().vocab));
  BenchRow row{"prefill", length, 0, {}, 0, 0};
  for (std::size_t r = 0; r <= o.reps; ++r) {
    DecodeSession<T> s;
    const auto t0 = std::chrono::steady_clock::now();
    prefill(m, prompt, s);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r > 0) row.samples.push_back(dt);
    row.kv_cache_bytes = s.kv_cache_bytes();
    row.recurrent_state_bytes = s.recurrent_state_bytes();
  }
  row.median = median_of(row.samples);
  return row;
}

inline void write_bench_tsv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "mode\tlength\tmedian_seconds\tkv_cache_bytes\trecurrent_state_bytes\n";
  for (const auto& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", r.median);
    os << r.mode << '\t' << r.length << '\t' << buf << '\t' << r.kv_cache_bytes << '\t' << r.recurrent_state_bytes
       << '\n';
  }
}

/// Least-squares slope of y against x.
inline double regression_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw Error("regression_slope needs >= 2 paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
  return sxy / sxx;
}

}  // namespace hybridkit
