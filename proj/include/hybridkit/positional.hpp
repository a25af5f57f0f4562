// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hybridkit/autodiff.hpp"

namespace hybridkit {

/// Rotary encoding parameters. Channel pairs are interleaved: (2i, 2i+1)
/// rotates by t * theta^(-2i/head_dim).
struct RopeParams {
  double theta = 50000.0;
  std::size_t head_dim = 64;

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0)
      throw ConfigError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
    if (!(theta > 0)) throw ConfigError("rope theta must be positive");
  }
};

/// Base a of the attention-logits scale s_t = log_a(t + a).
struct ScaleBase {
  double a = 500.0;

  ScaleBase() = default;
  explicit ScaleBase(double base) : a(base) { validate(); }
  void validate() const {
    if (!(a > 1.0)) throw ConfigError("logits scale base a must be > 1, got " + std::to_string(a));
  }
};

/// s_t = log(t + a) / log(a). Equals 1 at t = 0 and grows without bound.
inline double logits_scale(std::size_t t, ScaleBase base) {
  base.validate();
  return std::log(static_cast<double>(t) + base.a) / std::log(base.a);
}

/// How attention queries are scaled at position t before the softmax.
struct LogitsScaling {
  enum class Kind { None, LogBase, Constant };
  Kind kind = Kind::None;
  double value = 1.0;  // a for LogBase, s for Constant

  static LogitsScaling none() { return {}; }
  static LogitsScaling log_base(double a) {
    ScaleBase(a).validate();
    return {Kind::LogBase, a};
  }
  static LogitsScaling constant(double s) {
    if (!(s > 0)) throw ConfigError("constant logits scaling must be positive");
    return {Kind::Constant, s};
  }

  double factor(std::size_t t) const {
    switch (kind) {
      case Kind::LogBase:
        return logits_scale(t, ScaleBase(value));
      case Kind::Constant:
        return value;
      case Kind::None:
        break;
    }
    return 1.0;
  }

  std::string describe() const {
    switch (kind) {
      case Kind::LogBase:
        return "log_a(t+a), a=" + std::to_string(value);
      case Kind::Constant:
        return "constant " + std::to_string(value);
      case Kind::None:
        break;
    }
    return "none";
  }

  friend bool operator==(const LogitsScaling&, const LogitsScaling&) = default;
};

namespace detail {

/// Rotates x laid out as [outer, T, D] so that time index t maps to absolute
/// position start + t. sign = -1 applies the inverse rotation.
template <class T>
void rope_rotate(const T* src, T* dst, std::size_t outer, std::size_t seq, std::size_t D,
                 std::size_t start, double theta, double sign, bool accumulate) {
  std::vector<double> inv_freq(D / 2);
  for (std::size_t i = 0; i < D / 2; ++i)
    inv_freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(D));
  std::vector<T> cs(seq * D / 2), sn(seq * D / 2);
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t i = 0; i < D / 2; ++i) {
      const double ang = static_cast<double>(start + t) * inv_freq[i];
      cs[t * D / 2 + i] = static_cast<T>(std::cos(ang));
      sn[t * D / 2 + i] = static_cast<T>(sign * std::sin(ang));
    }
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < seq; ++t) {
      const T* x = src + (o * seq + t) * D;
      T* y = dst + (o * seq + t) * D;
      const T* c = cs.data() + t * D / 2;
      const T* s = sn.data() + t * D / 2;
      for (std::size_t i = 0; i < D / 2; ++i) {
        const T x0 = x[2 * i], x1 = x[2 * i + 1];
        const T y0 = x0 * c[i] - x1 * s[i];
        const T y1 = x0 * s[i] + x1 * c[i];
        if (accumulate) {
          y[2 * i] += y0;
          y[2 * i + 1] += y1;
        } else {
          y[2 * i] = y0;
          y[2 * i + 1] = y1;
        }
      }
    }
}

}  // namespace detail

/// Differentiable RoPE on [..., T, D]; time is the second-to-last axis.
template <class T>
Var<T> rope(const Var<T>& x, std::size_t start_pos, const RopeParams& params) {
  params.validate();
  const auto& s = x.shape();
  if (s.size() < 2 || s.back() != params.head_dim)
    throw ConfigError("rope: last dim " + std::to_string(s.empty() ? 0 : s.back()) +
                      " does not match head_dim " + std::to_string(params.head_dim));
  const std::size_t D = s.back(), seq = s[s.size() - 2], outer = x.size() / (D * seq);
  Tensor<T> out(s);
  detail::rope_rotate(x.value().data(), out.data(), outer, seq, D, start_pos, params.theta, 1.0,
                      false);
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r,
        [xn = x.node(), outer, seq, D, start_pos, theta = params.theta](const Tensor<T>& g) {
          detail::rope_rotate(g.data(), xn->grad_buffer().data(), outer, seq, D, start_pos, theta,
                              -1.0, true);
        },
        x);
  }
  return r;
}

/// RoPE on a [seq, heads, head_dim] tensor; row t sits at absolute position start_pos + t.
template <class T>
Tensor<T> rope_apply(const Tensor<T>& x, std::size_t start_pos, const RopeParams& params) {
  params.validate();
  if (x.rank() != 3) throw ShapeError("rope_apply expects [seq, heads, head_dim]");
  if (x.dim(2) != params.head_dim)
    throw ConfigError("rope_apply: head_dim " + std::to_string(x.dim(2)) + " != params " +
                      std::to_string(params.head_dim));
  const std::size_t seq = x.dim(0), H = x.dim(1), D = x.dim(2);
  Tensor<T> out(x.shape());
  // Each row t holds H vectors at the same position: rotate them as an
  // [H-major] block with seq = 1 and start = start_pos + t.
  for (std::size_t t = 0; t < seq; ++t)
    detail::rope_rotate(x.data() + t * H * D, out.data() + t * H * D, H, 1, D, start_pos + t,
                        params.theta, 1.0, false);
  return out;
}

/// Grid search over candidate bases; `loss_for` evaluates mean next-token loss
/// with s_t = log_a(t + a). Ties go to the smaller a.
inline ScaleBase fit_scale_base(const std::function<double(ScaleBase)>& loss_for,
                                std::vector<double> candidates) {
  if (candidates.empty()) throw Error("fit_scale_base: no candidates");
  std::sort(candidates.begin(), candidates.end());
  std::optional<ScaleBase> best;
  double best_loss = 0;
  for (double a : candidates) {
    const ScaleBase base(a);
    const double l = loss_for(base);
    if (!best || l < best_loss) {
      best = base;
      best_loss = l;
    }
  }
  return *best;
}

/// Candidate grid covering the bases reported for the published models.
inline std::vector<double> default_scale_candidates() {
  return {100, 200, 300, 500, 1000, 2000, 5000};
}

}  // namespace hybridkit
