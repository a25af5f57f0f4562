// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "hybridkit/autodiff.hpp"

namespace hybridkit {

namespace detail {

template <class T, class F>
T eval_scalar(F& f) {
  NoGradScope<T> ng;
  const Var<T> out = f();
  if (out.size() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
  const T v = out.item();
  if (!std::isfinite(v)) throw Error("finite_diff_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Compares the tape gradient of `loss()` with respect to each listed
/// parameter against central differences. Returns
///   max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12).
/// Parameters are perturbed in place and restored.
template <class T, class F>
double finite_diff_check_params(F&& loss, std::vector<Var<T>> params, double step) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    const Var<T> out = loss();
    if (out.size() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
    if (!std::isfinite(out.item())) throw Error("finite_diff_check: non-finite function value");
    tape.backward(out);
  }
  double worst = 0;
  for (auto& p : params) {
    const Tensor<T> analytic = p.grad();
    auto& v = p.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T orig = v[i];
      v[i] = orig + T(step);
      const T fp = detail::eval_scalar<T>(loss);
      v[i] = orig - T(step);
      const T fm = detail::eval_scalar<T>(loss);
      v[i] = orig;
      const double numeric = (double(fp) - double(fm)) / (2.0 * step);
      const double err = std::abs(double(analytic[i]) - numeric) / (std::abs(numeric) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input form: `f` maps a Var holding `x` to a scalar Var.
template <class T, class F>
double finite_diff_check(F&& f, const Tensor<T>& x, double step) {
  Var<T> leaf = Var<T>::parameter(x);
  return finite_diff_check_params<T>([&] { return f(leaf); }, {leaf}, step);
}

}  // namespace hybridkit
