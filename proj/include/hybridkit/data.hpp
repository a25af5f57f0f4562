// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "hybridkit/tensor.hpp"

namespace hybridkit {

/// Synthetic vocabulary layout (512 symbols by default).
namespace tok {
inline constexpr int kBos = 0;
inline constexpr int kNeedle = 1;
inline constexpr int kSep = 2;
inline constexpr int kQuery = 3;
inline constexpr int kFillerLo = 16;   // filler symbols: [16, 256)
inline constexpr int kFillerHi = 256;
inline constexpr int kKeyValueLo = 256;  // needle keys and values: [256, vocab)
}  // namespace tok

/// Seeded sparse Markov chain over the filler symbols. Each symbol has a
/// fixed set of `branching` successors with fixed weights, which gives text a
/// learnable local structure.
class Grammar {
 public:
  explicit Grammar(std::uint64_t seed = 1234, std::size_t branching = 4)
      : branching_(branching) {
    if (branching < 1) throw ConfigError("grammar branching must be >= 1");
    Rng rng(seed);
    const std::size_t n = size();
    succ_.resize(n * branching);
    cdf_.resize(n * branching);
    for (std::size_t s = 0; s < n; ++s) {
      std::vector<int> pool;
      while (pool.size() < branching) {
        const int c = tok::kFillerLo + static_cast<int>(rng.below(n));
        if (std::find(pool.begin(), pool.end(), c) == pool.end()) pool.push_back(c);
      }
      std::sort(pool.begin(), pool.end());
      double total = 0;
      std::vector<double> w(branching);
      for (auto& x : w) total += (x = 0.5 + rng.uniform());
      double acc = 0;
      for (std::size_t j = 0; j < branching; ++j) {
        succ_[s * branching + j] = pool[j];
        acc += w[j] / total;
        cdf_[s * branching + j] = acc;
      }
      cdf_[s * branching + branching - 1] = 1.0;
    }
  }

  static constexpr std::size_t size() { return tok::kFillerHi - tok::kFillerLo; }
  std::size_t branching() const { return branching_; }

  int start(Rng& rng) const { return tok::kFillerLo + static_cast<int>(rng.below(size())); }

  int next(int prev, Rng& rng) const {
    const std::size_t s = index(prev);
    const double u = rng.uniform();
    for (std::size_t j = 0; j < branching_; ++j)
      if (u < cdf_[s * branching_ + j]) return succ_[s * branching_ + j];
    return succ_[s * branching_ + branching_ - 1];
  }

  bool allowed(int prev, int next) const {
    if (!is_filler(prev) || !is_filler(next)) return false;
    const std::size_t s = index(prev);
    for (std::size_t j = 0; j < branching_; ++j)
      if (succ_[s * branching_ + j] == next) return true;
    return false;
  }

  /// n symbols continuing from `prev` (or from a random start when prev < 0).
  std::vector<int> sample(std::size_t n, Rng& rng, int prev = -1) const {
    std::vector<int> out;
    out.reserve(n);
    int cur = prev;
    for (std::size_t i = 0; i < n; ++i) {
      cur = is_filler(cur) ? next(cur, rng) : start(rng);
      out.push_back(cur);
    }
    return out;
  }

  static bool is_filler(int t) { return t >= tok::kFillerLo && t < tok::kFillerHi; }

 private:
  static std::size_t index(int t) {
    if (!is_filler(t)) throw Error("grammar: token " + std::to_string(t) + " is not a filler symbol");
    return static_cast<std::size_t>(t - tok::kFillerLo);
  }

  std::size_t branching_;
  std::vector<int> succ_;
  std::vector<double> cdf_;
};

/// Random key or value of n symbols from the key/value range.
inline std::vector<int> random_kv(std::size_t n, std::size_t vocab, Rng& rng) {
  if (vocab <= static_cast<std::size_t>(tok::kKeyValueLo))
    throw ConfigError("vocab " + std::to_string(vocab) + " leaves no key/value symbols");
  std::vector<int> out(n);
  for (auto& t : out) t = tok::kKeyValueLo + static_cast<int>(rng.below(vocab - tok::kKeyValueLo));
  return out;
}

/// Training stream: grammar text, optionally carrying planted key/value
/// needles that are queried at the end of the sequence.
struct CorpusSpec {
  std::size_t vocab = 512;
  std::uint64_t grammar_seed = 1234;
  double niah_fraction = 0.5;  // share of sequences carrying needles
  std::size_t needles = 2;     // needles per carrying sequence
  std::size_t key_len = 4;
  std::size_t value_len = 4;
  bool separator = true;  // SEP between key and value in needles and queries

  void validate() const {
    if (!(niah_fraction >= 0 && niah_fraction <= 1)) throw ConfigError("niah_fraction must be in [0, 1]");
    if (key_len == 0 || value_len == 0) throw ConfigError("key_len and value_len must be >= 1");
    if (vocab <= static_cast<std::size_t>(tok::kKeyValueLo))
      throw ConfigError("vocab must exceed " + std::to_string(tok::kKeyValueLo));
  }
};

class Corpus {
 public:
  explicit Corpus(CorpusSpec spec) : spec_(spec), grammar_(spec.grammar_seed) { spec_.validate(); }

  const CorpusSpec& spec() const { return spec_; }
  const Grammar& grammar() const { return grammar_; }

  /// One sequence of exactly n tokens.
  std::vector<int> sequence(std::size_t n, Rng& rng) const {
    const std::size_t block = spec_.key_len + spec_.value_len + 1 + spec_.separator;
    const bool plant = spec_.needles > 0 && rng.uniform() < spec_.niah_fraction &&
                       n >= spec_.needles * 2 * block + 8;
    if (!plant) return grammar_.sample(n, rng);
    std::vector<std::vector<int>> keys, values;
    for (std::size_t i = 0; i < spec_.needles; ++i) {
      keys.push_back(random_kv(spec_.key_len, spec_.vocab, rng));
      values.push_back(random_kv(spec_.value_len, spec_.vocab, rng));
    }
    const std::size_t filler = n - spec_.needles * 2 * block;
    std::vector<std::size_t> cuts(spec_.needles);
    for (auto& c : cuts) c = rng.below(filler + 1);
    std::sort(cuts.begin(), cuts.end());
    std::vector<int> out;
    out.reserve(n);
    std::size_t done = 0;
    for (std::size_t i = 0; i < spec_.needles; ++i) {
      append_filler(out, cuts[i] - done, rng);
      done = cuts[i];
      out.push_back(tok::kNeedle);
      out.insert(out.end(), keys[i].begin(), keys[i].end());
      if (spec_.separator) out.push_back(tok::kSep);
      out.insert(out.end(), values[i].begin(), values[i].end());
    }
    append_filler(out, filler - done, rng);
    std::vector<std::size_t> order(spec_.needles);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t i : order) {
      out.push_back(tok::kQuery);
      out.insert(out.end(), keys[i].begin(), keys[i].end());
      if (spec_.separator) out.push_back(tok::kSep);
      out.insert(out.end(), values[i].begin(), values[i].end());
    }
    return out;
  }

  /// B sequences of length T+1, flattened ([B, T+1]).
  std::vector<int> batch(std::size_t B, std::size_t T, Rng& rng) const {
    std::vector<int> out;
    out.reserve(B * (T + 1));
    for (std::size_t b = 0; b < B; ++b) {
      const auto s = sequence(T + 1, rng);
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  void append_filler(std::vector<int>& out, std::size_t n, Rng& rng) const {
    if (n == 0) return;
    const int prev = out.empty() ? -1 : out.back();
    const auto f = grammar_.sample(n, rng, Grammar::is_filler(prev) ? prev : -1);
    out.insert(out.end(), f.begin(), f.end());
  }

 private:
  CorpusSpec spec_;
  Grammar grammar_;
};

/// Splits [B, T+1] sequences into inputs [B, T] and next-token targets [B, T].
inline std::pair<std::vector<int>, std::vector<int>> shift_targets(const std::vector<int>& seqs,
                                                                   std::size_t B, std::size_t T) {
  if (seqs.size() != B * (T + 1)) throw ShapeError("shift_targets: expected B*(T+1) tokens");
  std::vector<int> x, y;
  x.reserve(B * T);
  y.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    const int* s = seqs.data() + b * (T + 1);
    x.insert(x.end(), s, s + T);
    y.insert(y.end(), s + 1, s + T + 1);
  }
  return {x, y};
}

// ---------------------------------------------------------- corpus cache

/// Directory named by HYBRIDKIT_CACHE, or empty when unset.
inline std::filesystem::path cache_dir() {
  const char* v = std::getenv("HYBRIDKIT_CACHE");
  return v && *v ? std::filesystem::path(v) : std::filesystem::path();
}

/// Returns the token sequences stored under `key` in the cache directory, or
/// generates, stores and returns them. Without a cache directory this is just
/// `make()`.
inline std::vector<std::vector<int>> cached_sequences(
    const std::string& key, const std::function<std::vector<std::vector<int>>()>& make) {
  const auto dir = cache_dir();
  if (dir.empty()) return make();
  const auto path = dir / (key + ".tok");
  if (std::ifstream in{path, std::ios::binary}) {
    std::uint64_t n = 0;
    std::vector<std::vector<int>> out;
    if (in.read(reinterpret_cast<char*>(&n), 8)) {
      out.resize(n);
      bool ok = true;
      for (auto& s : out) {
        std::uint64_t len = 0;
        ok = ok && static_cast<bool>(in.read(reinterpret_cast<char*>(&len), 8));
        if (!ok || len > (1u << 28)) {
          ok = false;
          break;
        }
        s.resize(len);
        ok = static_cast<bool>(in.read(reinterpret_cast<char*>(s.data()),
                                       static_cast<std::streamsize>(len * sizeof(std::int32_t))));
      }
      if (ok) return out;
    }
  }
  auto out = make();
  std::filesystem::create_directories(dir);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary);
    const std::uint64_t n = out.size();
    o.write(reinterpret_cast<const char*>(&n), 8);
    for (const auto& s : out) {
      const std::uint64_t len = s.size();
      o.write(reinterpret_cast<const char*>(&len), 8);
      std::vector<std::int32_t> buf(s.begin(), s.end());
      o.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(std::int32_t)));
    }
  }
  std::filesystem::rename(tmp, path);
  return out;
}

}  // namespace hybridkit
