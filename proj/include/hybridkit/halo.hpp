// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "hybridkit/data.hpp"
#include "hybridkit/eval.hpp"
#include "hybridkit/model.hpp"
#include "json.hpp"

namespace hybridkit {

// --------------------------------------------------------------- schedule

enum class Schedule { Cosine, Constant };

inline std::string to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

struct TrainConfig {
  std::size_t tokens_budget = 0;  // sets steps = budget / (batch * context) when steps == 0
  std::size_t context_len = 256;
  std::size_t batch_size = 8;
  std::size_t steps = 0;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  Schedule schedule = Schedule::Cosine;
  std::size_t warmup_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;

  std::size_t total_steps() const {
    if (steps || !tokens_budget) return steps;
    return std::max<std::size_t>(1, tokens_budget / std::max<std::size_t>(1, batch_size * context_len));
  }

  void validate() const {
    if (batch_size == 0 || context_len == 0) throw ConfigError("batch_size and context_len must be >= 1");
    if (!(lr_min >= 0) || !(lr_max >= 0)) throw ConfigError("learning rates must be >= 0");
    if (lr_min > lr_max) throw ConfigError("lr_min must be <= lr_max");
    if (warmup_steps > total_steps()) throw ConfigError("warmup_steps must be <= steps");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be >= 0");
  }
};

/// Linear warmup from 0 to lr_max, then cosine decay to lr_min (or constant
/// lr_max) over the remaining steps.
inline double lr_at(std::size_t step, const TrainConfig& c) {
  const std::size_t S = c.total_steps();
  if (step >= S) throw Error("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(S) + ")");
  if (step < c.warmup_steps) return c.lr_max * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  if (c.schedule == Schedule::Constant) return c.lr_max;
  const double p = static_cast<double>(step - c.warmup_steps) / static_cast<double>(S - c.warmup_steps);
  return c.lr_min + (c.lr_max - c.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

// --------------------------------------------------------------- optimizer

/// Global L2 norm of the gradients; scales them down to max_norm when above
/// it (max_norm == 0 only measures). Missing gradients count as zero.
template <class T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params)
    if (p.has_grad())
      for (std::size_t i = 0; i < p.size(); ++i) sq += static_cast<double>(p.grad()[i]) * p.grad()[i];
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && std::isfinite(norm) && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (auto& g : p.mutable_grad().storage()) g *= s;
  }
  return norm;
}

/// Adam with decoupled weight decay and bias correction.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Var<T>> params, double beta1 = 0.9, double beta2 = 0.95, double eps = 1e-8,
        double weight_decay = 0.0)
      : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    for (auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  static AdamW from(std::vector<Var<T>> params, const TrainConfig& c) {
    return AdamW(std::move(params), c.beta1, c.beta2, c.eps, c.weight_decay);
  }

  std::vector<Var<T>>& params() { return params_; }
  std::size_t t() const { return t_; }
  std::size_t skipped() const { return skipped_; }
  std::size_t consecutive_skipped() const { return run_skipped_; }

  /// Applies one update from the current gradients. A non-finite gradient
  /// skips the update and returns false.
  bool step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& p = params_[k];
      if (m_[k].shape() != p.shape())
        throw ShapeError("AdamW: state shape " + shape_str(m_[k].shape()) + " does not match parameter " +
                         shape_str(p.shape()));
      if (p.has_grad())
        for (T g : p.grad().storage())
          if (!std::isfinite(static_cast<double>(g))) {
            ++skipped_;
            ++run_skipped_;
            return false;
          }
    }
    ++t_;
    run_skipped_ = 0;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const double decay = 1.0 - lr * wd_;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].mutable_value();
      const bool g_ok = params_[k].has_grad();
      const T* g = g_ok ? params_[k].grad().data() : nullptr;
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? static_cast<double>(g[i]) : 0.0;
        const double mi = b1_ * m[i] + (1.0 - b1_) * gi;
        const double vi = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double x = static_cast<double>(p[i]);
        if (wd_ != 0.0) x *= decay;
        x -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps_);
        p[i] = static_cast<T>(x);
      }
    }
    return true;
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
  std::size_t run_skipped_ = 0;
};

// ----------------------------------------------------------------- reports

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  bool skipped = false;
};

struct StageReport {
  std::string stage;
  std::vector<StepRecord> steps;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  std::vector<std::string> warnings;
  double wall_seconds = 0;

  /// One object per step, then one summary object.
  void write_jsonl(std::ostream& os) const {
    for (const auto& s : steps) {
      nlohmann::ordered_json j{{"stage", stage}, {"step", s.step}, {"lr", s.lr}, {"loss", s.loss},
                               {"grad_norm", s.grad_norm}};
      if (s.skipped) j["skipped"] = true;
      os << j.dump() << '\n';
    }
    nlohmann::ordered_json j{{"stage", stage}, {"steps", steps.size()}, {"summary", summary},
                             {"wall_seconds", wall_seconds}};
    if (!warnings.empty()) j["warnings"] = warnings;
    os << j.dump() << '\n';
  }
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void zero_grads(auto& params) {
  for (auto& p : params) p.zero_grad();
}

inline constexpr std::size_t kMaxConsecutiveSkips = 8;

/// One optimizer step on loss_fn(). Throws DivergenceError on a non-finite
/// loss or after kMaxConsecutiveSkips updates in a row with non-finite gradients.
template <class T>
StepRecord train_step(AdamW<T>& opt, const TrainConfig& cfg, std::size_t step,
                      const std::function<Var<T>()>& loss_fn, const std::string& stage) {
  zero_grads(opt.params());
  Tape<T> tape;
  StepRecord r;
  r.step = step;
  r.lr = lr_at(step, cfg);
  {
    TapeScope<T> scope(tape);
    Var<T> loss = loss_fn();
    r.loss = static_cast<double>(loss.item());
    if (!std::isfinite(r.loss))
      throw DivergenceError(stage + ": non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
  }
  r.grad_norm = clip_grad_norm(opt.params(), cfg.grad_clip);
  r.skipped = !opt.step(r.lr);
  zero_grads(opt.params());
  if (opt.consecutive_skipped() >= kMaxConsecutiveSkips)
    throw DivergenceError(stage + ": " + std::to_string(opt.consecutive_skipped()) +
                          " consecutive steps with non-finite gradients ending at step " + std::to_string(step));
  return r;
}

inline std::uint64_t heldout_seed(std::uint64_t seed) { return seed ^ 0x5eedf00dcafe1234ull; }

/// Training never applies the inference-time logits scaling.
template <class T>
ForwardOptions<T> train_forward_options() {
  ForwardOptions<T> o;
  o.scaling = LogitsScaling::none();
  return o;
}

}  // namespace detail

// ---------------------------------------------------------- LM training

/// Mean next-token cross-entropy of the model on [B, T+1] sequences.
template <class T>
Var<T> lm_loss(const Model<T>& m, const std::vector<int>& seqs, std::size_t B, std::size_t Tn) {
  auto [x, y] = shift_targets(seqs, B, Tn);
  return cross_entropy(forward(m, x, B, Tn, detail::train_forward_options<T>()), y);
}

/// Held-out cross-entropy on `batches` fixed batches of the corpus.
template <class T>
double heldout_lm_loss(const Model<T>& m, const Corpus& corpus, std::size_t B, std::size_t Tn,
                       std::uint64_t seed, std::size_t batches = 1) {
  NoGradScope<T> ng;
  Rng rng(detail::heldout_seed(seed));
  double tot = 0;
  for (std::size_t i = 0; i < batches; ++i) tot += static_cast<double>(lm_loss(m, corpus.batch(B, Tn, rng), B, Tn).item());
  return tot / static_cast<double>(batches);
}

/// Next-token training of every model parameter on the corpus.
template <class T>
StageReport train_lm(Model<T>& m, const Corpus& corpus, const TrainConfig& cfg, const std::string& stage = "train",
                     StageReport* partial = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  StageReport local;
  StageReport& rep = partial ? *partial : local;
  rep.stage = stage;
  auto opt = AdamW<T>::from(m.parameters(), cfg);
  Rng rng(cfg.seed);
  const std::size_t B = cfg.batch_size, Tn = cfg.context_len;
  for (std::size_t s = 0; s < cfg.total_steps(); ++s) {
    const auto seqs = corpus.batch(B, Tn, rng);
    rep.steps.push_back(detail::train_step<T>(opt, cfg, s, [&] { return lm_loss(m, seqs, B, Tn); }, stage));
  }
  rep.summary["final_loss"] = rep.steps.empty() ? 0.0 : rep.steps.back().loss;
  rep.summary["skipped_steps"] = opt.skipped();
  rep.wall_seconds = detail::seconds_since(t0);
  return rep;
}

// ------------------------------------------------------------------ stage 1

struct Stage1Result {
  std::vector<std::size_t> layers;
  std::vector<double> initial_mse;  // on a held-out batch, per layer
  std::vector<double> final_mse;
  std::vector<StageReport> reports;
};

/// Trains the mixer of each listed RNN layer of `student` to reproduce the
/// teacher's mixer output from the teacher's own mixer input (mean squared
/// error over all elements). Layers train in lockstep on shared teacher
/// forwards, each with its own optimizer; nothing else in `student` changes.
template <class T>
Stage1Result stage1_align(const Model<T>& teacher, Model<T>& student, std::vector<std::size_t> layers,
                          const Corpus& corpus, const TrainConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tc = teacher.config();
  const auto& sc = student.config();
  if (tc.n_layers != sc.n_layers || tc.d != sc.d) throw ConfigError("stage1: teacher and student shapes differ");
  for (std::size_t l : layers) {
    if (l >= sc.n_layers) throw ConfigError("stage1: layer " + std::to_string(l) + " out of range");
    if (sc.is_attention(l)) throw ConfigError("stage1: layer " + std::to_string(l) + " of the student is not an RNN layer");
  }
  const std::size_t B = cfg.batch_size, Tn = cfg.context_len, d = tc.d;
  const std::size_t n = layers.size();

  auto captures = [&](Rng& rng) {
    const auto seqs = corpus.batch(B, Tn, rng);
    std::vector<int> x = shift_targets(seqs, B, Tn).first;
    NoGradScope<T> ng;
    std::vector<LayerCapture<T>> cap;
    ForwardOptions<T> o = detail::train_forward_options<T>();
    o.capture = &cap;
    forward(teacher, x, B, Tn, o);
    return cap;
  };
  auto layer_loss = [&](std::size_t l, const LayerCapture<T>& c) {
    const Var<T> x = Var<T>::constant(c.x_in.reshaped({B, Tn, d}));
    const Var<T> y = mixer_forward(student, l, student.layer(l), x, LogitsScaling::none(), 0);
    return mse(y, c.y_mixer);
  };
  auto heldout = [&] {
    Rng rng(detail::heldout_seed(cfg.seed));
    const auto cap = captures(rng);
    std::vector<double> out(n);
    NoGradScope<T> ng;
    parallel_for(n, threads, [&](std::size_t i) {
      NoGradScope<T> ngi;
      out[i] = static_cast<double>(layer_loss(layers[i], cap[layers[i]]).item());
    });
    return out;
  };

  Stage1Result res;
  res.layers = layers;
  res.initial_mse = heldout();
  std::vector<AdamW<T>> opts;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Var<T>> ps;
    for (auto& [name, v] : student.layer(layers[i]).mixer.named()) ps.push_back(v);
    opts.push_back(AdamW<T>::from(ps, cfg));
    res.reports.emplace_back();
    res.reports.back().stage = "stage1.layer" + std::to_string(layers[i]);
  }
  Rng rng(cfg.seed);
  for (std::size_t s = 0; s < cfg.total_steps(); ++s) {
    const auto cap = captures(rng);
    std::vector<StepRecord> recs(n);
    parallel_for(n, threads, [&](std::size_t i) {
      recs[i] = detail::train_step<T>(opts[i], cfg, s, [&] { return layer_loss(layers[i], cap[layers[i]]); },
                                      res.reports[i].stage);
    });
    for (std::size_t i = 0; i < n; ++i) res.reports[i].steps.push_back(recs[i]);
  }
  res.final_mse = heldout();
  const double wall = detail::seconds_since(t0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = res.reports[i];
    r.summary["layer"] = layers[i];
    r.summary["initial_mse"] = res.initial_mse[i];
    r.summary["final_mse"] = res.final_mse[i];
    r.summary["skipped_steps"] = opts[i].skipped();
    r.wall_seconds = wall;
  }
  return res;
}

// --------------------------------------------------------------- selection

struct LayerScore {
  std::size_t layer = 0;
  double R = 0;
  double C = 0;
  double s = 0;
};

inline constexpr double kImportanceEps = 1e-6;

/// s_i = (max R - R_i) / (max C - C_i + eps).
inline std::vector<double> layer_importance(const std::vector<std::pair<double, double>>& rc,
                                            double eps = kImportanceEps) {
  if (rc.empty()) throw Error("layer_importance: empty score list");
  double rmax = rc[0].first, cmax = rc[0].second;
  for (const auto& [r, c] : rc) {
    if (!(r >= 0 && r <= 1) || !(c >= 0 && c <= 1)) throw Error("layer_importance: scores must lie in [0, 1]");
    rmax = std::max(rmax, r);
    cmax = std::max(cmax, c);
  }
  std::vector<double> s;
  s.reserve(rc.size());
  for (const auto& [r, c] : rc) s.push_back((rmax - r) / (cmax - c + eps));
  return s;
}

/// Order of layers by importance: descending s, lower index first on ties.
inline std::vector<std::size_t> importance_order(const std::vector<double>& s) {
  std::vector<std::size_t> idx(s.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return idx;
}

/// The k most important layers, sorted ascending.
inline std::vector<std::size_t> select_attention_layers(const std::vector<double>& s, long long k) {
  if (k <= 0) throw ConfigError("select_attention_layers: k must be >= 1");
  if (static_cast<std::size_t>(k) > s.size())
    throw ConfigError("select_attention_layers: k " + std::to_string(k) + " exceeds " + std::to_string(s.size()) +
                      " layers");
  auto idx = importance_order(s);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<LayerScore> make_layer_scores(const std::vector<std::pair<double, double>>& rc) {
  const auto s = layer_importance(rc);
  std::vector<LayerScore> out;
  for (std::size_t i = 0; i < rc.size(); ++i) out.push_back({i, rc[i].first, rc[i].second, s[i]});
  return out;
}

struct RCEvalSpec {
  NiahSpec niah;  // R: recall accuracy
  CsrSpec csr;    // C: CSR-proxy accuracy
  std::size_t threads = 1;
};

/// (R, C) of one candidate model, scored with its configured logits scaling.
template <class T>
std::pair<double, double> evaluate_RC(const Model<T>& m, const RCEvalSpec& spec) {
  const ModelScorer<T> sc(m);
  return {score_recall(sc, spec.niah, spec.threads).value, score_csr(sc, spec.csr, spec.threads).value};
}

/// The teacher with exactly layer i's mixer swapped for the candidate's.
template <class T>
Model<T> replace_one_layer(const Model<T>& teacher, const Model<T>& candidates, std::size_t i) {
  if (i >= candidates.config().n_layers) throw Error("candidate weights missing for layer " + std::to_string(i));
  const auto& lw = candidates.layer(i);
  if (lw.kind == MixerKind::Attention || !lw.mixer.wq.defined())
    throw Error("candidate weights missing for layer " + std::to_string(i));
  Model<T> m = teacher.with_layer(i, lw);
  ModelConfig c = m.config();
  c.rnn_pe = candidates.config().rnn_pe;
  c.rnn_gate = candidates.config().rnn_gate;
  m.set_config(c);
  return m;
}

/// Scores every layer i by evaluating M^(i).
template <class T>
std::vector<LayerScore> score_layers(const Model<T>& teacher, const Model<T>& candidates, const RCEvalSpec& spec) {
  std::vector<std::pair<double, double>> rc;
  for (std::size_t i = 0; i < teacher.config().n_layers; ++i)
    rc.push_back(evaluate_RC(replace_one_layer(teacher, candidates, i), spec));
  return make_layer_scores(rc);
}

/// Hybrid with teacher attention at attn_layers and candidate RNN layers
/// elsewhere, as independent copies of both.
template <class T>
Model<T> assemble_hybrid(const Model<T>& teacher, const Model<T>& candidates, const std::vector<std::size_t>& attn) {
  Model<T> h = candidates;
  for (std::size_t l : attn) h = h.with_layer(l, teacher.layer(l));
  return h.deep_copy();
}

// ------------------------------------------------------------------ stage 2

/// Mean per-token KL(teacher || student) on [B, T+1] sequences.
template <class T>
Var<T> distill_loss(const Model<T>& teacher, const Model<T>& student, const std::vector<int>& seqs, std::size_t B,
                    std::size_t Tn) {
  const auto x = shift_targets(seqs, B, Tn).first;
  Tensor<T> tl;
  {
    NoGradScope<T> ng;
    tl = forward(teacher, x, B, Tn, detail::train_forward_options<T>()).value();
  }
  return kl_divergence(tl, forward(student, x, B, Tn, detail::train_forward_options<T>()));
}

template <class T>
double heldout_kl(const Model<T>& teacher, const Model<T>& student, const Corpus& corpus, std::size_t B,
                  std::size_t Tn, std::uint64_t seed) {
  NoGradScope<T> ng;
  Rng rng(detail::heldout_seed(seed));
  return static_cast<double>(distill_loss(teacher, student, corpus.batch(B, Tn, rng), B, Tn).item());
}

/// End-to-end distillation of every student parameter against the frozen teacher.
template <class T>
StageReport stage2_distill(const Model<T>& teacher, Model<T>& student, const Corpus& corpus, const TrainConfig& cfg,
                           StageReport* partial = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  StageReport local;
  StageReport& rep = partial ? *partial : local;
  rep.stage = "stage2";
  const std::size_t B = cfg.batch_size, Tn = cfg.context_len;
  rep.summary["initial_kl"] = heldout_kl(teacher, student, corpus, B, Tn, cfg.seed);
  auto opt = AdamW<T>::from(student.parameters(), cfg);
  Rng rng(cfg.seed);
  for (std::size_t s = 0; s < cfg.total_steps(); ++s) {
    const auto seqs = corpus.batch(B, Tn, rng);
    rep.steps.push_back(
        detail::train_step<T>(opt, cfg, s, [&] { return distill_loss(teacher, student, seqs, B, Tn); }, "stage2"));
  }
  rep.summary["final_kl"] = heldout_kl(teacher, student, corpus, B, Tn, cfg.seed);
  rep.summary["skipped_steps"] = opt.skipped();
  rep.wall_seconds = detail::seconds_since(t0);
  return rep;
}

// ------------------------------------------------------------------ stage 3

/// Long-context next-token finetuning. Warns when the context is not longer
/// than stage 2's or the schedule is not constant.
template <class T>
StageReport stage3_finetune(Model<T>& m, const Corpus& corpus, const TrainConfig& cfg, std::size_t stage2_context,
                            StageReport* partial = nullptr) {
  cfg.validate();
  StageReport local;
  StageReport& rep = partial ? *partial : local;
  rep.stage = "stage3";
  if (cfg.context_len < stage2_context)
    rep.warnings.push_back("stage3 context " + std::to_string(cfg.context_len) + " is below the stage2 context " +
                           std::to_string(stage2_context));
  if (cfg.schedule != Schedule::Constant) rep.warnings.push_back("stage3 schedule is not constant");
  const std::size_t B = cfg.batch_size, Tn = cfg.context_len;
  rep.summary["initial_loss"] = heldout_lm_loss(m, corpus, B, Tn, cfg.seed);
  const auto warnings = rep.warnings;
  train_lm(m, corpus, cfg, "stage3", &rep);
  rep.warnings = warnings;
  rep.summary["final_loss_heldout"] = heldout_lm_loss(m, corpus, B, Tn, cfg.seed);
  return rep;
}

// ---------------------------------------------------------- full pipeline

struct HaloConfig {
  TrainConfig stage1{.context_len = 256, .steps = 100, .lr_max = 1e-3, .lr_min = 1e-5, .warmup_steps = 10};
  TrainConfig stage2{.context_len = 256, .steps = 100, .lr_max = 1e-4, .lr_min = 1e-5, .warmup_steps = 10};
  TrainConfig stage3{.context_len = 1024, .batch_size = 2, .steps = 50, .lr_max = 1e-5, .lr_min = 1e-5,
                     .schedule = Schedule::Constant};
  RCEvalSpec rc;
  std::size_t k = 0;  // attention layers to keep; 0 means floor(L / 4)
  MixerKind rnn_kind = MixerKind::Lightning;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

template <class T>
struct HaloResult {
  Model<T> candidates;  // every layer as a stage-1 aligned RNN
  Stage1Result stage1;
  std::vector<LayerScore> scores;
  std::vector<std::size_t> attn_layers;
  Model<T> stage2;
  StageReport stage2_report;
  Model<T> final;
  StageReport stage3_report;
};

inline std::size_t default_attention_count(std::size_t L) { return L / 4; }

/// init, stage 1 on every layer, selection, stage 2, stage 3. The teacher is
/// never modified.
template <class T>
HaloResult<T> run_halo(const Model<T>& teacher, const Corpus& corpus, const HaloConfig& hc) {
  const std::size_t L = teacher.config().n_layers;
  HaloResult<T> r;
  Rng rng(hc.seed);
  r.candidates = init_hybrid_from_teacher(teacher, {}, rng, hc.rnn_kind);
  std::vector<std::size_t> all(L);
  for (std::size_t l = 0; l < L; ++l) all[l] = l;
  r.stage1 = stage1_align(teacher, r.candidates, all, corpus, hc.stage1, hc.threads);
  r.scores = score_layers(teacher, r.candidates, hc.rc);
  std::vector<double> s;
  for (const auto& x : r.scores) s.push_back(x.s);
  const std::size_t k = hc.k ? hc.k : default_attention_count(L);
  r.attn_layers = select_attention_layers(s, static_cast<long long>(k));
  r.stage2 = prepare_stage2(assemble_hybrid(teacher, r.candidates, r.attn_layers), rng);
  r.stage2_report = stage2_distill(teacher, r.stage2, corpus, hc.stage2);
  r.final = r.stage2.deep_copy();
  r.stage3_report = stage3_finetune(r.final, corpus, hc.stage3, hc.stage2.context_len);
  return r;
}

}  // namespace hybridkit
