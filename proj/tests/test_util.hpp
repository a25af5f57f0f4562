// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "hybridkit/autodiff.hpp"
#include "hybridkit/gradcheck.hpp"

namespace hk_test {

using hybridkit::Rng;
using hybridkit::Shape;
using hybridkit::Tensor;
using hybridkit::Var;

// Reduces an arbitrary-shape output to a scalar with fixed random weights so
// finite differences see every output entry.
template <class T>
Var<T> weighted_sum(const Var<T>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return hybridkit::sum(hybridkit::mul(y, Var<T>::constant(hybridkit::randn<T>(y.shape(), rng, 1.0))));
}

template <class T>
double grad_error(const std::function<Var<T>()>& f, const std::vector<Var<T>>& params,
                  double step = 1e-5) {
  return hybridkit::finite_diff_check_params<T>([&] { return weighted_sum(f()); }, params, step);
}

}  // namespace hk_test
