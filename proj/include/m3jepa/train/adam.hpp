// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay. Moments and step counts are kept per
// parameter so a parameter skipped on some steps keeps its own bias
// correction.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "m3jepa/core/narray.hpp"
#include "m3jepa/train/schedule.hpp"

namespace m3jepa {

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  bool operator==(const AdamMoments&) const = default;
};

/// p ← p·(1 − lr·wd), then the bias-corrected Adam step with the gradient of p.
inline void adam_update(NArray& p, AdamMoments& s, double lr, const TrainConfig& cfg) {
  const auto g = p.grad();
  auto x = p.data();
  if (s.m.empty()) {
    s.m.assign(x.size(), 0.0);
    s.v.assign(x.size(), 0.0);
  }
  if (s.m.size() != x.size()) throw DimensionError("adam: moment size does not match parameter");
  s.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    x[i] = x[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

}  // namespace m3jepa
