// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "m3jepa/core/narray.hpp"

namespace m3jepa {

/// Central differences of `f` with respect to every coordinate of `p`.
/// `p` is perturbed in place and restored; `f` must be deterministic.
inline NArray finite_diff_grad(const std::function<double()>& f, NArray& p, double eps = 1e-5) {
  if (!(eps > 0.0)) throw PreconditionError("finite_diff_grad: eps must be positive");
  NArray out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.at(i);
    p.at(i) = orig + eps;
    const double up = f();
    p.at(i) = orig - eps;
    const double down = f();
    p.at(i) = orig;
    out.at(i) = (up - down) / (2.0 * eps);
  }
  return out;
}

/// max|a−b| / max(max|a|, max|b|, floor). The floor keeps all-zero
/// gradients from turning finite-difference roundoff into a large ratio.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace m3jepa
