// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "m3jepa/core/error.hpp"

namespace m3jepa {

enum class ScheduleMode { agd, joint };

inline const char* to_string(ScheduleMode m) { return m == ScheduleMode::joint ? "joint" : "agd"; }

struct TrainConfig {
  std::uint64_t steps = 3000;
  double lr_init = 1e-3;
  double lr_final = 5.5e-6;
  double warmup_frac = 0.1;
  double weight_decay = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  ScheduleMode mode = ScheduleMode::agd;
  std::vector<int> task_order;
  std::uint64_t checkpoint_interval = 0;  // 0: only at the end

  void validate() const {
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ValidationError("train.warmup_frac: must lie in [0, 1)");
    if (!(lr_final >= 0.0)) throw ValidationError("train.lr_final: must be >= 0");
    if (!(lr_init >= lr_final)) throw ValidationError("train.lr_init: must be >= lr_final");
    if (weight_decay < 0.0) throw ValidationError("train.weight_decay: must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train.beta2: must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ValidationError("train.eps: must be > 0");
    if (batch_size < 1) throw ValidationError("train.batch_size: must be >= 1");
    if (task_order.empty()) throw ValidationError("train.task_order: must name at least one task");
  }
};

/// Position in the task order used at step i: i mod T.
inline std::size_t task_slot(std::uint64_t i, std::size_t num_tasks) {
  if (num_tasks == 0) throw PreconditionError("task order is empty");
  return static_cast<std::size_t>(i % num_tasks);
}

inline int task_for_step(std::uint64_t i, const std::vector<int>& task_order) {
  return task_order[task_slot(i, task_order.size())];
}

/// Linear warmup from 0 to lr_init over warmup_frac·steps, then cosine decay to lr_final at `steps`.
inline double lr_at(std::uint64_t i, const TrainConfig& cfg) {
  const double n = static_cast<double>(cfg.steps);
  const double warm = cfg.warmup_frac * n;
  const double x = static_cast<double>(i);
  if (x < warm) return cfg.lr_init * x / warm;
  const double span = n - warm;
  const double progress = span > 0.0 ? std::min(1.0, (x - warm) / span) : 1.0;
  return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace m3jepa
