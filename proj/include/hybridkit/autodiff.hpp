// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hybridkit/gemm.hpp"
#include "hybridkit/tensor.hpp"

namespace hybridkit {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void accumulate(const Tensor<T>& g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }
};

template <class T>
class Tape;

/// Handle to a value in the computation graph. Copies share the node, so two
/// Vars that alias one parameter see each other's updates.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  bool same_node(const Var& o) const { return node_ == o.node_; }

  /// Deep copy of the value into a fresh leaf with the same requires_grad flag.
  Var detached_copy() const { return Var(node_->value, node_->requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Execution-ordered record of differentiable ops. backward() walks it in
/// strict reverse. One tape belongs to one thread.
template <class T>
class Tape {
 public:
  void record(std::shared_ptr<Node<T>> n) { records_.push_back(std::move(n)); }

  void note_leaf(const std::shared_ptr<Node<T>>& n) {
    if (n->is_leaf && n->requires_grad && leaf_set_.insert(n.get()).second) leaves_.push_back(n);
  }

  std::size_t size() const { return records_.size(); }

  void clear() {
    records_.clear();
    leaves_.clear();
    leaf_set_.clear();
  }

  /// Propagates d(loss)/d(node) to every recorded node and requires-grad leaf.
  void backward(const Var<T>& loss) {
    if (loss.size() != 1)
      throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
    const auto& ln = loss.node();
    if (!ln->requires_grad || ln->is_leaf ||
        std::find(records_.begin(), records_.end(), ln) == records_.end())
      throw Error("backward: loss is not on this tape");
    ln->grad_buffer().fill(T(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n.grad);
      if (&n != ln.get()) n.grad = Tensor<T>();
    }
    for (auto& leaf : leaves_) leaf->grad_buffer();
  }

 private:
  std::vector<std::shared_ptr<Node<T>>> records_;
  std::vector<std::shared_ptr<Node<T>>> leaves_;
  std::unordered_set<const Node<T>*> leaf_set_;
};

template <class T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(current_tape<T>()) { current_tape<T>() = &tape; }
  ~TapeScope() { current_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording (teacher forwards inside a training step).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(current_tape<T>()) { current_tape<T>() = nullptr; }
  ~NoGradScope() { current_tape<T>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace ad {

template <class T, class... Vs>
Tape<T>* recording(const Vs&... vs) {
  Tape<T>* tape = current_tape<T>();
  if (!tape) return nullptr;
  const bool any = (vs.requires_grad() || ...);
  return any ? tape : nullptr;
}

/// Attaches a backward rule to `out` and records it. The rule receives
/// d(loss)/d(out) and accumulates into its captured inputs.
template <class T, class Fn, class... Vs>
void attach(Tape<T>& tape, Var<T>& out, Fn&& fn, const Vs&... inputs) {
  auto& n = out.node();
  n->requires_grad = true;
  n->is_leaf = false;
  n->backward = std::forward<Fn>(fn);
  (tape.note_leaf(inputs.node()), ...);
  tape.record(n);
}

inline void check_suffix(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i)
    ok = a[a.size() - b.size() + i] == b[i];
  if (!ok)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " do not agree (second must match trailing dims of first)");
}

}  // namespace ad

// ---------------------------------------------------------------- elementwise

/// a + b, where b may be broadcast over a's leading dimensions.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  ad::check_suffix(a.shape(), b.shape(), "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % nb];
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(a, b)) {
    ad::attach(
        *tp, r,
        [an = a.node(), bn = b.node(), nb](const Tensor<T>& g) {
          if (an->requires_grad) an->accumulate(g);
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
          }
        },
        a, b);
  }
  return r;
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  ad::check_suffix(a.shape(), b.shape(), "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % nb];
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(a, b)) {
    ad::attach(
        *tp, r,
        [an = a.node(), bn = b.node(), nb](const Tensor<T>& g) {
          if (an->requires_grad) an->accumulate(g);
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
          }
        },
        a, b);
  }
  return r;
}

/// a ⊙ b, with the same broadcasting rule as add.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  ad::check_suffix(a.shape(), b.shape(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % nb];
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(a, b)) {
    ad::attach(
        *tp, r,
        [an = a.node(), bn = b.node(), nb](const Tensor<T>& g) {
          const auto& av = an->value;
          const auto& bv = bn->value;
          if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % nb];
          }
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * av[i];
          }
        },
        a, b);
  }
  return r;
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(a)) {
    ad::attach(
        *tp, r,
        [an = a.node(), c](const Tensor<T>& g) {
          auto& ga = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        },
        a);
  }
  return r;
}

namespace ad {

template <class T>
inline T sigmoid_scalar(T x) {
  // Split by sign so neither branch overflows exp.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T, class F, class D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Var<T> r(std::move(out));
  if (auto* tp = recording<T>(a)) {
    attach(
        *tp, r,
        [an = a.node(), dfdx](const Tensor<T>& g) {
          const auto& av = an->value;
          auto& ga = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(av[i]);
        },
        a);
  }
  return r;
}

}  // namespace ad

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return ad::unary(
      a, [](T x) { return ad::sigmoid_scalar(x); },
      [](T x) {
        const T s = ad::sigmoid_scalar(x);
        return s * (T(1) - s);
      });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return ad::unary(
      a, [](T x) { return x * ad::sigmoid_scalar(x); },
      [](T x) {
        const T s = ad::sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

/// sigmoid(x)^p, a forget gate in (0,1) that can sit close to 1 for p < 1.
template <class T>
Var<T> sigmoid_pow(const Var<T>& a, T p) {
  return ad::unary(
      a, [p](T x) { return std::pow(ad::sigmoid_scalar(x), p); },
      [p](T x) {
        const T s = ad::sigmoid_scalar(x);
        return p * std::pow(s, p) * (T(1) - s);
      });
}

// -------------------------------------------------------------------- matmul

namespace ad {

struct MatmulDims {
  std::size_t batch = 1, M = 0, N = 0, K = 0;
  bool shared_b = false;  // b is a single rank-2 matrix used for every batch
  Shape out;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool ta, bool tb) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a) + " and " +
                     shape_str(b));
  MatmulDims d;
  const std::size_t ar = a[a.size() - 2], ac = a.back();
  const std::size_t br = b[b.size() - 2], bc = b.back();
  d.M = ta ? ac : ar;
  const std::size_t ka = ta ? ar : ac;
  d.N = tb ? br : bc;
  const std::size_t kb = tb ? bc : br;
  if (ka != kb)
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a) + " and " + shape_str(b));
  d.K = ka;
  d.shared_b = b.size() == 2;
  if (!d.shared_b) {
    if (b.size() != a.size() || !std::equal(a.begin(), a.end() - 2, b.begin()))
      throw ShapeError("matmul batch dimensions differ: " + shape_str(a) + " and " +
                       shape_str(b));
  }
  for (std::size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
  d.out.assign(a.begin(), a.end() - 2);
  d.out.push_back(d.M);
  d.out.push_back(d.N);
  return d;
}

}  // namespace ad

/// op(a)·op(b) over the last two dims. b is either rank 2 (shared across a's
/// leading dims) or has the same leading dims as a.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  const auto d = ad::matmul_dims(a.shape(), b.shape(), trans_a, trans_b);
  Tensor<T> out(d.out);
  const T* A = a.value().data();
  const T* B = b.value().data();
  const std::size_t sa = d.M * d.K, sb = d.shared_b ? 0 : d.K * d.N, sc = d.M * d.N;
  if (d.shared_b && !trans_a) {
    kernels::gemm(false, trans_b, d.batch * d.M, d.N, d.K, A, B, out.data());
  } else {
    for (std::size_t i = 0; i < d.batch; ++i)
      kernels::gemm(trans_a, trans_b, d.M, d.N, d.K, A + i * sa, B + i * sb, out.data() + i * sc);
  }
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(a, b)) {
    ad::attach(
        *tp, r,
        [an = a.node(), bn = b.node(), d, trans_a, trans_b](const Tensor<T>& g) {
          const T* A = an->value.data();
          const T* B = bn->value.data();
          const T* G = g.data();
          const std::size_t M = d.M, N = d.N, K = d.K;
          const std::size_t sa = M * K, sb = d.shared_b ? 0 : K * N, sc = M * N;
          if (an->requires_grad) {
            T* GA = an->grad_buffer().data();
            if (d.shared_b && !trans_a) {
              const std::size_t MM = d.batch * M;
              if (!trans_b)
                kernels::gemm(false, true, MM, K, N, G, B, GA, true);
              else
                kernels::gemm(false, false, MM, K, N, G, B, GA, true);
            } else {
              for (std::size_t i = 0; i < d.batch; ++i) {
                const T* Gi = G + i * sc;
                const T* Bi = B + i * sb;
                T* GAi = GA + i * sa;
                if (!trans_a)
                  kernels::gemm(false, !trans_b, M, K, N, Gi, Bi, GAi, true);
                else if (!trans_b)
                  kernels::gemm(false, true, K, M, N, Bi, Gi, GAi, true);
                else
                  kernels::gemm(true, true, K, M, N, Bi, Gi, GAi, true);
              }
            }
          }
          if (bn->requires_grad) {
            T* GB = bn->grad_buffer().data();
            if (d.shared_b && !trans_a) {
              const std::size_t MM = d.batch * M;
              if (!trans_b)
                kernels::gemm(true, false, K, N, MM, A, G, GB, true);
              else
                kernels::gemm(true, false, N, K, MM, G, A, GB, true);
            } else {
              for (std::size_t i = 0; i < d.batch; ++i) {
                const T* Ai = A + i * sa;
                const T* Gi = G + i * sc;
                T* GBi = GB + i * sb;
                if (!trans_b)
                  kernels::gemm(!trans_a, false, K, N, M, Ai, Gi, GBi, true);
                else
                  kernels::gemm(true, trans_a, N, K, M, Gi, Ai, GBi, true);
              }
            }
          }
        },
        a, b);
  }
  return r;
}

/// a·bᵀ
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return matmul(a, b, false, true);
}

/// aᵀ·b
template <class T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  return matmul(a, b, true, false);
}

// ------------------------------------------------------------------- softmax

namespace ad {

/// Row softmax over the last dim of a [rows, S] block whose row r belongs to
/// query position (r % R) of an R×S causal pattern with offset S-R.
template <class T>
void softmax_block(const T* x, T* y, std::size_t R, std::size_t S, bool causal) {
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(S) - static_cast<std::ptrdiff_t>(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x + r * S;
    T* yr = y + r * S;
    std::size_t lim = S;
    if (causal) {
      const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(r) + off;
      if (last < 0) throw Error("softmax_rows: row with every entry masked");
      lim = std::min<std::size_t>(S, static_cast<std::size_t>(last) + 1);
    }
    T m = xr[0];
    for (std::size_t s = 1; s < lim; ++s) m = std::max(m, xr[s]);
    T z = 0;
    for (std::size_t s = 0; s < lim; ++s) {
      yr[s] = std::exp(xr[s] - m);
      z += yr[s];
    }
    const T inv = T(1) / z;
    for (std::size_t s = 0; s < lim; ++s) yr[s] *= inv;
    for (std::size_t s = lim; s < S; ++s) yr[s] = T(0);
  }
}

}  // namespace ad

/// Softmax over the last dimension. With `causal`, the trailing two dims are
/// read as [queries R, keys S] and key s is visible to query r iff s <= r + S - R.
template <class T>
Var<T> softmax_rows(const Var<T>& x, bool causal = false) {
  const auto& xv = x.value();
  if (xv.rank() < 1 || xv.shape().back() < 1) throw ShapeError("softmax_rows: empty last dim");
  const std::size_t S = xv.shape().back();
  const std::size_t rows = xv.size() / S;
  Tensor<T> out(xv.shape());
  if (causal) {
    const std::size_t R = xv.rank() >= 2 ? xv.dim(-2) : 1;
    for (std::size_t b = 0; b < rows / R; ++b)
      ad::softmax_block(xv.data() + b * R * S, out.data() + b * R * S, R, S, true);
  } else {
    ad::softmax_block(xv.data(), out.data(), rows, S, false);
  }
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r,
        [xn = x.node(), yn = r.node().get(), S](const Tensor<T>& g) {
          const auto& y = yn->value;
          auto& gx = xn->grad_buffer();
          for (std::size_t row = 0; row < y.size() / S; ++row) {
            const T* yr = y.data() + row * S;
            const T* gr = g.data() + row * S;
            T dot = 0;
            for (std::size_t s = 0; s < S; ++s) dot += yr[s] * gr[s];
            T* out = gx.data() + row * S;
            for (std::size_t s = 0; s < S; ++s) out[s] += yr[s] * (gr[s] - dot);
          }
        },
        x);
  }
  return r;
}

// ------------------------------------------------------------------- rmsnorm

/// y = x / sqrt(mean(x²) + eps) ⊙ gain over the last dimension.
template <class T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, T eps = T(1e-6)) {
  const auto& xv = x.value();
  const std::size_t n = xv.shape().back();
  if (gain.size() != n)
    throw ShapeError("rmsnorm gain length " + std::to_string(gain.size()) +
                     " does not match last dim of " + shape_str(xv.shape()));
  const std::size_t rows = xv.size() / n;
  const T* gv = gain.value().data();
  Tensor<T> out(xv.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * n;
    T ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += xr[i] * xr[i];
    inv[r] = T(1) / std::sqrt(ss / T(n) + eps);
    T* yr = out.data() + r * n;
    for (std::size_t i = 0; i < n; ++i) yr[i] = xr[i] * inv[r] * gv[i];
  }
  Var<T> res(std::move(out));
  if (auto* tp = ad::recording<T>(x, gain)) {
    ad::attach(
        *tp, res,
        [xn = x.node(), gn = gain.node(), inv = std::move(inv), n, rows](const Tensor<T>& g) {
          const T* xv = xn->value.data();
          const T* gv = gn->value.data();
          T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
          T* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv + r * n;
            const T* gr = g.data() + r * n;
            const T ir = inv[r];
            if (gg)
              for (std::size_t i = 0; i < n; ++i) gg[i] += gr[i] * xr[i] * ir;
            if (gx) {
              T dot = 0;
              for (std::size_t i = 0; i < n; ++i) dot += xr[i] * gv[i] * gr[i];
              const T c = ir * ir * ir * dot / T(n);
              T* o = gx + r * n;
              for (std::size_t i = 0; i < n; ++i) o[i] += ir * gv[i] * gr[i] - xr[i] * c;
            }
          }
        },
        x, gain);
  }
  return res;
}

// ------------------------------------------------------------- shape changes

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Var<T> r(x.value().reshaped(std::move(s)));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r, [xn = x.node()](const Tensor<T>& g) { xn->accumulate(g); }, x);
  }
  return r;
}

namespace ad {

template <class T>
void swap12(const T* src, T* dst, std::size_t A, std::size_t B, std::size_t C, std::size_t D,
            bool accumulate) {
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* s = src + ((a * B + b) * C + c) * D;
        T* t = dst + ((a * C + c) * B + b) * D;
        if (accumulate)
          for (std::size_t e = 0; e < D; ++e) t[e] += s[e];
        else
          for (std::size_t e = 0; e < D; ++e) t[e] = s[e];
      }
}

}  // namespace ad

/// [A, B, C, D] -> [A, C, B, D]. Used to move between [batch, time, head, dim]
/// and [batch, head, time, dim].
template <class T>
Var<T> transpose12(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("transpose12 expects rank 4, got " + shape_str(s));
  const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
  Tensor<T> out(Shape{A, C, B, D});
  ad::swap12(x.value().data(), out.data(), A, B, C, D, false);
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r,
        [xn = x.node(), A, B, C, D](const Tensor<T>& g) {
          ad::swap12(g.data(), xn->grad_buffer().data(), A, C, B, D, true);
        },
        x);
  }
  return r;
}

/// [B, H, T, D] -> [B, H*g, T, D]; output head h reads input head h / g.
template <class T>
Var<T> repeat_heads(const Var<T>& x, std::size_t g) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("repeat_heads expects rank 4, got " + shape_str(s));
  if (g == 1) return x;
  const std::size_t B = s[0], H = s[1], blk = s[2] * s[3];
  Tensor<T> out(Shape{B, H * g, s[2], s[3]});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H * g; ++h)
      std::copy_n(x.value().data() + (b * H + h / g) * blk, blk, out.data() + (b * H * g + h) * blk);
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r,
        [xn = x.node(), B, H, g, blk](const Tensor<T>& gr) {
          auto& gx = xn->grad_buffer();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H * g; ++h) {
              const T* src = gr.data() + (b * H * g + h) * blk;
              T* dst = gx.data() + (b * H + h / g) * blk;
              for (std::size_t i = 0; i < blk; ++i) dst[i] += src[i];
            }
        },
        x);
  }
  return r;
}

/// Slice [start, start+len) along dimension `axis` (negative counts from back).
template <class T>
Var<T> slice(const Var<T>& x, int axis, std::size_t start, std::size_t len) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  const std::size_t ax = static_cast<std::size_t>(axis < 0 ? r + axis : axis);
  if (ax >= s.size() || start + len > s[ax])
    throw ShapeError("slice out of range on " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape os = s;
  os[ax] = len;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * n + start) * inner, len * inner,
                out.data() + o * len * inner);
  Var<T> res(std::move(out));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, res,
        [xn = x.node(), outer, inner, n, start, len](const Tensor<T>& g) {
          auto& gx = xn->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * len * inner;
            T* dst = gx.data() + (o * n + start) * inner;
            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        },
        x);
  }
  return res;
}

/// Concatenate along `axis`; all other dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  if (xs.size() == 1) return xs[0];
  const Shape& s0 = xs[0].shape();
  const int r = static_cast<int>(s0.size());
  const std::size_t ax = static_cast<std::size_t>(axis < 0 ? r + axis : axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = s0;
    if (a.size() != b.size()) throw ShapeError("concat rank mismatch");
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(s0));
    lens.push_back(x.shape()[ax]);
    total += lens.back();
  }
  Shape os = s0;
  os[ax] = total;
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xs[k].value().data() + o * lens[k] * inner, lens[k] * inner,
                  out.data() + (o * total + off) * inner);
    off += lens[k];
  }
  Var<T> res(std::move(out));
  Tape<T>* tp = current_tape<T>();
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (tp && any) {
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& x : xs) {
      nodes.push_back(x.node());
      tp->note_leaf(x.node());
    }
    auto& n = res.node();
    n->requires_grad = true;
    n->is_leaf = false;
    n->backward = [nodes, lens, outer, inner, total](const Tensor<T>& g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k]->requires_grad) {
          auto& gx = nodes[k]->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + (o * total + off) * inner;
            T* dst = gx.data() + o * lens[k] * inner;
            for (std::size_t i = 0; i < lens[k] * inner; ++i) dst[i] += src[i];
          }
        }
        off += lens[k];
      }
    };
    tp->record(n);
  }
  return res;
}

/// Rows of `table` [V, d] gathered by ids; output shape is `lead` + [d].
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids, Shape lead) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const std::size_t V = tv.dim(0), d = tv.dim(1);
  if (shape_numel(lead) != ids.size()) throw ShapeError("embedding: ids do not match shape");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw Error("token id " + std::to_string(id) + " out of range for vocab " +
                  std::to_string(V));
  lead.push_back(d);
  Tensor<T> out(lead);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  Var<T> r(std::move(out));
  if (auto* tp = ad::recording<T>(table)) {
    ad::attach(
        *tp, r,
        [tn = table.node(), ids, d](const Tensor<T>& g) {
          auto& gt = tn->grad_buffer();
          for (std::size_t i = 0; i < ids.size(); ++i) {
            T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
            const T* src = g.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        },
        table);
  }
  return r;
}

// -------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().storage()) s += v;
  Var<T> r(Tensor<T>::scalar(s));
  if (auto* tp = ad::recording<T>(x)) {
    ad::attach(
        *tp, r,
        [xn = x.node()](const Tensor<T>& g) {
          auto& gx = xn->grad_buffer();
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        },
        x);
  }
  return r;
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

/// Mean over all elements of (a - target)².
template <class T>
Var<T> mse(const Var<T>& a, const Tensor<T>& target) {
  if (a.shape() != target.shape())
    throw ShapeError("mse shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(target.shape()));
  const auto& av = a.value();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - target[i];
    s += d * d;
  }
  const T n = T(av.size());
  Var<T> r(Tensor<T>::scalar(s / n));
  if (auto* tp = ad::recording<T>(a)) {
    ad::attach(
        *tp, r,
        [an = a.node(), target, n](const Tensor<T>& g) {
          auto& ga = an->grad_buffer();
          const auto& av = an->value;
          for (std::size_t i = 0; i < av.size(); ++i)
            ga[i] += g[0] * T(2) * (av[i] - target[i]) / n;
        },
        a);
  }
  return r;
}

namespace ad {

/// log-softmax of one row of length V into out; returns nothing.
template <class T>
void log_softmax_row(const T* x, T* out, std::size_t V) {
  T m = x[0];
  for (std::size_t i = 1; i < V; ++i) m = std::max(m, x[i]);
  T z = 0;
  for (std::size_t i = 0; i < V; ++i) z += std::exp(x[i] - m);
  const T lz = m + std::log(z);
  for (std::size_t i = 0; i < V; ++i) out[i] = x[i] - lz;
}

}  // namespace ad

/// Mean next-token negative log-likelihood. Rows with target < 0 are ignored.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  const auto& lv = logits.value();
  const std::size_t V = lv.shape().back();
  const std::size_t rows = lv.size() / V;
  if (targets.size() != rows) throw ShapeError("cross_entropy: target count mismatch");
  Tensor<T> logp(Shape{rows, V});
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    ad::log_softmax_row(lv.data() + r * V, logp.data() + r * V, V);
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= V) throw Error("cross_entropy: target out of range");
    total -= logp[r * V + static_cast<std::size_t>(targets[r])];
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: no scored targets");
  Var<T> res(Tensor<T>::scalar(total / T(count)));
  if (auto* tp = ad::recording<T>(logits)) {
    ad::attach(
        *tp, res,
        [ln = logits.node(), logp = std::move(logp), targets, V, rows, count](const Tensor<T>& g) {
          auto& gl = ln->grad_buffer();
          const T c = g[0] / T(count);
          for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] < 0) continue;
            T* o = gl.data() + r * V;
            const T* lp = logp.data() + r * V;
            for (std::size_t i = 0; i < V; ++i) o[i] += c * std::exp(lp[i]);
            o[static_cast<std::size_t>(targets[r])] -= c;
          }
        },
        logits);
  }
  return res;
}

/// Mean over rows of KL(p_teacher ‖ p_student), both given as logits over
/// the last dim. The teacher side is a constant.
template <class T>
Var<T> kl_divergence(const Tensor<T>& teacher_logits, const Var<T>& student_logits) {
  const auto& sv = student_logits.value();
  if (sv.shape() != teacher_logits.shape())
    throw ShapeError("kl_divergence shape mismatch " + shape_str(sv.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  const std::size_t V = sv.shape().back();
  const std::size_t rows = sv.size() / V;
  Tensor<T> ps(Shape{rows, V}), pt(Shape{rows, V});
  std::vector<T> lt(V), ls(V);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    ad::log_softmax_row(teacher_logits.data() + r * V, lt.data(), V);
    ad::log_softmax_row(sv.data() + r * V, ls.data(), V);
    T kl = 0;
    for (std::size_t i = 0; i < V; ++i) {
      const T p = std::exp(lt[i]);
      pt[r * V + i] = p;
      ps[r * V + i] = std::exp(ls[i]);
      if (p > T(0)) kl += p * (lt[i] - ls[i]);
    }
    total += kl;
  }
  Var<T> res(Tensor<T>::scalar(total / T(rows)));
  if (auto* tp = ad::recording<T>(student_logits)) {
    ad::attach(
        *tp, res,
        [sn = student_logits.node(), ps = std::move(ps), pt = std::move(pt), rows](
            const Tensor<T>& g) {
          auto& gs = sn->grad_buffer();
          const T c = g[0] / T(rows);
          for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += c * (ps[i] - pt[i]);
        },
        student_logits);
  }
  return res;
}

}  // namespace hybridkit
