// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "hybridkit/data.hpp"
#include "hybridkit/model.hpp"

namespace hybridkit {

/// Runs fn(i) for i in [0, n) on up to `threads` worker threads. The first
/// exception thrown by any worker is rethrown on the caller.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ------------------------------------------------------------------ scorers

/// What the evaluation suites need from a language model.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::size_t vocab() const = 0;
  /// Greedy continuation of `prompt` by n tokens.
  virtual std::vector<int> greedy(const std::vector<int>& prompt, std::size_t n) const = 0;
  /// log p(seq[t+1] | seq[0..t]) for t = 0 .. seq.size()-2.
  virtual std::vector<double> next_token_logprobs(const std::vector<int>& seq) const = 0;
};

/// Log-softmax of one row, evaluated at `target`.
template <class T>
double log_prob_at(const T* row, std::size_t V, int target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < V; ++i) mx = std::max(mx, static_cast<double>(row[i]));
  double z = 0;
  for (std::size_t i = 0; i < V; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
  return static_cast<double>(row[target]) - mx - std::log(z);
}

template <class T>
class ModelScorer final : public Scorer {
 public:
  explicit ModelScorer(const Model<T>& m, std::optional<LogitsScaling> scaling = std::nullopt)
      : m_(m), scaling_(scaling) {}

  std::size_t vocab() const override { return m_.config().vocab; }

  std::vector<int> greedy(const std::vector<int>& prompt, std::size_t n) const override {
    return greedy_decode(m_, prompt, n, scaling_);
  }

  std::vector<double> next_token_logprobs(const std::vector<int>& seq) const override {
    if (seq.size() < 2) return {};
    const std::vector<int> in(seq.begin(), seq.end() - 1);
    const Tensor<T> lg = logits(m_, in, scaling_);
    const std::size_t V = vocab();
    std::vector<double> out(in.size());
    for (std::size_t t = 0; t < in.size(); ++t) out[t] = log_prob_at(lg.data() + t * V, V, seq[t + 1]);
    return out;
  }

 private:
  const Model<T>& m_;
  std::optional<LogitsScaling> scaling_;
};

/// Uniform distribution over the vocabulary; greedy output is seeded noise.
class UniformScorer final : public Scorer {
 public:
  explicit UniformScorer(std::size_t vocab, std::uint64_t seed = 0) : vocab_(vocab), seed_(seed) {}
  std::size_t vocab() const override { return vocab_; }
  std::vector<int> greedy(const std::vector<int>& prompt, std::size_t n) const override {
    std::uint64_t h = seed_ ^ 0x9e3779b97f4a7c15ull;
    for (int t : prompt) h = (h ^ static_cast<std::uint64_t>(t)) * 0x100000001b3ull;
    Rng rng(h);
    std::vector<int> out(n);
    for (auto& t : out) t = static_cast<int>(rng.below(vocab_));
    return out;
  }
  std::vector<double> next_token_logprobs(const std::vector<int>& seq) const override {
    const double lp = -std::log(static_cast<double>(vocab_));
    return std::vector<double>(seq.size() < 2 ? 0 : seq.size() - 1, lp);
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------- results

struct EvalResult {
  std::string task;
  std::size_t context_len = 0;
  double value = 0;  // accuracy for niah/csr, perplexity for ppl
  std::size_t correct = 0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

/// Two-sided binomial interval for the number of successes at confidence
/// 1-alpha, computed from the exact binomial tail sums.
inline std::pair<std::size_t, std::size_t> binomial_interval(std::size_t n, double p, double alpha = 0.01) {
  std::vector<double> pmf(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double lg = std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(n - k) + 1);
    const double lp = (k ? double(k) * std::log(p) : 0.0) + (n - k ? double(n - k) * std::log1p(-p) : 0.0);
    pmf[k] = p <= 0 ? (k == 0 ? 1.0 : 0.0) : p >= 1 ? (k == n ? 1.0 : 0.0) : std::exp(lg + lp);
  }
  std::size_t lo = 0, hi = n;
  double acc = 0;
  for (std::size_t k = 0; k <= n; ++k) {
    acc += pmf[k];
    if (acc > alpha / 2) {
      lo = k;
      break;
    }
  }
  acc = 0;
  for (std::size_t k = n + 1; k-- > 0;) {
    acc += pmf[k];
    if (acc > alpha / 2) {
      hi = k;
      break;
    }
  }
  return {lo, hi};
}

// -------------------------------------------------------------------- NIAH

struct NiahSpec {
  std::size_t context_len = 1024;
  std::size_t n_samples = 200;
  std::size_t key_len = 4;
  std::size_t value_len = 4;
  std::size_t vocab = 512;
  std::uint64_t seed = 7;
  std::uint64_t grammar_seed = 1234;
  std::optional<double> depth;  // fixed relative needle depth; uniform in [0, 1] when unset
  bool separator = true;        // SEP after the key in the needle and the query

  std::size_t min_context() const { return 2 * key_len + value_len + 2 + 2 * separator; }
};

struct NiahSample {
  std::vector<int> prompt;
  std::vector<int> answer;
  std::size_t needle_pos = 0;
};

/// Prompt layout: filler, NEEDLE key SEP value, filler, QUERY key SEP (the
/// SEP tokens are dropped without a separator). The prompt is exactly
/// context_len tokens; the answer is the value.
inline std::vector<NiahSample> gen_niah(const NiahSpec& s) {
  if (s.key_len == 0 || s.value_len == 0) throw ConfigError("NIAH key_len and value_len must be >= 1");
  if (s.context_len < s.min_context())
    throw ConfigError("NIAH context_len " + std::to_string(s.context_len) + " is below the minimum " +
                      std::to_string(s.min_context()));
  if (s.depth && !(*s.depth >= 0 && *s.depth <= 1)) throw ConfigError("NIAH depth must be in [0, 1]");
  const Grammar grammar(s.grammar_seed);
  Rng rng(s.seed);
  const std::size_t filler = s.context_len - s.min_context();
  std::vector<NiahSample> out;
  out.reserve(s.n_samples);
  for (std::size_t i = 0; i < s.n_samples; ++i) {
    const auto key = random_kv(s.key_len, s.vocab, rng);
    const auto value = random_kv(s.value_len, s.vocab, rng);
    const double depth = s.depth ? *s.depth : rng.uniform();
    const auto before = static_cast<std::size_t>(std::llround(depth * static_cast<double>(filler)));
    NiahSample smp;
    auto& p = smp.prompt;
    p.reserve(s.context_len);
    p = grammar.sample(before, rng);
    smp.needle_pos = p.size();
    p.push_back(tok::kNeedle);
    p.insert(p.end(), key.begin(), key.end());
    if (s.separator) p.push_back(tok::kSep);
    p.insert(p.end(), value.begin(), value.end());
    if (filler > before) {
      const auto f = grammar.sample(filler - before, rng);
      p.insert(p.end(), f.begin(), f.end());
    }
    p.push_back(tok::kQuery);
    p.insert(p.end(), key.begin(), key.end());
    if (s.separator) p.push_back(tok::kSep);
    smp.answer = value;
    out.push_back(std::move(smp));
  }
  return out;
}

/// Exact-match accuracy of greedy decoding on the answer tokens.
inline EvalResult score_recall(const Scorer& model, const std::vector<NiahSample>& samples,
                               std::size_t threads = 1) {
  std::vector<char> hit(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    hit[i] = model.greedy(samples[i].prompt, samples[i].answer.size()) == samples[i].answer;
  });
  EvalResult r;
  r.task = "niah";
  r.n_samples = samples.size();
  r.context_len = samples.empty() ? 0 : samples.front().prompt.size();
  r.correct = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
  r.value = samples.empty() ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.n_samples);
  return r;
}

inline EvalResult score_recall(const Scorer& model, const NiahSpec& spec, std::size_t threads = 1) {
  EvalResult r = score_recall(model, gen_niah(spec), threads);
  r.context_len = spec.context_len;
  r.seed = spec.seed;
  return r;
}

// ---------------------------------------------------------------- CSR proxy

struct CsrSpec {
  std::size_t n_samples = 200;
  std::size_t context_len = 24;
  std::size_t choice_len = 4;
  std::size_t n_choices = 4;
  std::uint64_t seed = 11;
  std::uint64_t grammar_seed = 1234;
};

struct CsrSample {
  std::vector<int> context;
  std::vector<std::vector<int>> choices;
  std::size_t answer = 0;
};

/// Grammar text followed by a choice among continuations: one follows the
/// grammar, the distractors start with a transition the grammar never makes.
inline std::vector<CsrSample> gen_csr_proxy(const CsrSpec& s) {
  if (s.n_samples < 1) throw ConfigError("CSR proxy needs n >= 1");
  if (s.n_choices < 2 || s.choice_len < 1 || s.context_len < 1)
    throw ConfigError("CSR proxy needs >= 2 choices and nonempty context and choices");
  const Grammar g(s.grammar_seed);
  Rng rng(s.seed);
  std::vector<CsrSample> out;
  for (std::size_t i = 0; i < s.n_samples; ++i) {
    CsrSample smp;
    smp.context = g.sample(s.context_len, rng);
    smp.answer = rng.below(s.n_choices);
    for (std::size_t c = 0; c < s.n_choices; ++c) {
      if (c == smp.answer) {
        smp.choices.push_back(g.sample(s.choice_len, rng, smp.context.back()));
        continue;
      }
      int first;
      do first = g.start(rng);
      while (g.allowed(smp.context.back(), first));
      auto rest = g.sample(s.choice_len - 1, rng, first);
      rest.insert(rest.begin(), first);
      smp.choices.push_back(std::move(rest));
    }
    out.push_back(std::move(smp));
  }
  return out;
}

/// Total log-likelihood of each choice given the context.
inline std::vector<double> choice_scores(const Scorer& model, const CsrSample& s) {
  std::vector<double> out;
  for (const auto& c : s.choices) {
    std::vector<int> seq = s.context;
    seq.insert(seq.end(), c.begin(), c.end());
    const auto lp = model.next_token_logprobs(seq);
    double tot = 0;
    for (std::size_t t = s.context.size() - 1; t < lp.size(); ++t) tot += lp[t];
    out.push_back(tot);
  }
  return out;
}

/// Accuracy of picking the highest-likelihood choice (first index on ties).
inline EvalResult score_csr(const Scorer& model, const std::vector<CsrSample>& samples,
                            std::size_t threads = 1) {
  std::vector<char> hit(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto sc = choice_scores(model, samples[i]);
    hit[i] = static_cast<std::size_t>(std::max_element(sc.begin(), sc.end()) - sc.begin()) == samples[i].answer;
  });
  EvalResult r;
  r.task = "csr";
  r.n_samples = samples.size();
  r.context_len = samples.empty() ? 0 : samples.front().context.size();
  r.correct = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
  r.value = samples.empty() ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.n_samples);
  return r;
}

inline EvalResult score_csr(const Scorer& model, const CsrSpec& spec, std::size_t threads = 1) {
  EvalResult r = score_csr(model, gen_csr_proxy(spec), threads);
  r.seed = spec.seed;
  return r;
}

// -------------------------------------------------------------- perplexity

/// exp of the mean next-token NLL. Each document is cut into consecutive
/// windows of context_len tokens (0 keeps documents whole); every window
/// scores its tokens after the first.
inline double perplexity(const Scorer& model, const std::vector<std::vector<int>>& corpus,
                         std::size_t context_len = 0, std::size_t threads = 1) {
  std::vector<std::vector<int>> windows;
  for (const auto& doc : corpus) {
    const std::size_t w = context_len ? context_len : doc.size();
    for (std::size_t s = 0; s + 1 < doc.size(); s += w)
      windows.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(s),
                           doc.begin() + static_cast<std::ptrdiff_t>(std::min(doc.size(), s + w)));
  }
  if (windows.empty()) throw Error("perplexity: empty corpus");
  std::vector<double> nll(windows.size(), 0.0);
  std::vector<std::size_t> cnt(windows.size(), 0);
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    for (double lp : model.next_token_logprobs(windows[i])) nll[i] -= lp;
    cnt[i] = windows[i].size() - 1;
  });
  double tot = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    tot += nll[i];
    n += cnt[i];
  }
  if (n == 0) throw Error("perplexity: corpus has no scored tokens");
  return std::exp(tot / static_cast<double>(n));
}

// ------------------------------------------------------------ length sweep

/// NIAH accuracy at each length; the base spec supplies everything else.
inline std::vector<EvalResult> length_sweep(const Scorer& model, const std::vector<std::size_t>& lengths,
                                            NiahSpec base = {}, std::size_t threads = 1) {
  if (lengths.empty()) throw ConfigError("length_sweep: no lengths");
  if (!std::is_sorted(lengths.begin(), lengths.end())) throw ConfigError("length_sweep: lengths must be ascending");
  std::vector<EvalResult> rows;
  for (std::size_t L : lengths) {
    base.context_len = L;
    rows.push_back(score_recall(model, base, threads));
  }
  return rows;
}

/// Plot data: a header line, then one row per result.
inline void write_tsv(std::ostream& os, const std::vector<EvalResult>& rows) {
  os << "task\tlength\tvalue\tcorrect\tn_samples\tseed\n";
  for (const auto& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.task << '\t' << r.context_len << '\t' << buf << '\t' << r.correct << '\t' << r.n_samples << '\t'
       << r.seed << '\n';
  }
}

// --------------------------------------------------------- scale fitting

/// Grid search for the logits-scaling base a that minimizes NLL on documents
/// longer than the training context.
template <class T>
ScaleBase fit_model_scale_base(const Model<T>& m, const std::vector<std::vector<int>>& docs,
                               std::size_t train_context, std::vector<double> candidates = default_scale_candidates(),
                               std::size_t threads = 1) {
  if (docs.empty()) throw ConfigError("fit_scale_base: empty held-out set");
  for (const auto& d : docs)
    if (d.size() <= train_context)
      throw ConfigError("fit_scale_base: held-out documents must be longer than the training context " +
                        std::to_string(train_context));
  return fit_scale_base(
      [&](ScaleBase b) {
        const ModelScorer<T> sc(m, LogitsScaling::log_base(b.a));
        return std::log(perplexity(sc, docs, 0, threads));
      },
      std::move(candidates));
}

}  // namespace hybridkit
