// SPDX-License-Identifier: Apache-2.0
//
// Baselines sharing the Predictor contract: a parameter-matched two-layer
// MLP per task, and a plain linear map per task. Both duplicate their single
// output onto the two loss paths.
#pragma once

#include <cmath>

#include "m3jepa/core/seed.hpp"
#include "m3jepa/model/predictor.hpp"

namespace m3jepa {

inline std::string task_key(const TaskSpec& t) {
  return modality_signature(t.inputs) + ">" + modality_signature(t.outputs);
}

/// Σ over distinct task keys of (input dim + output dim).
inline std::size_t mlp_width_factor(const ModalityRegistry& reg) {
  std::vector<std::string> seen;
  std::size_t s = 0;
  for (const auto& t : reg.tasks()) {
    if (std::find(seen.begin(), seen.end(), task_key(t)) != seen.end()) continue;
    seen.push_back(task_key(t));
    s += reg.input_dim(t) + reg.output_dim(t);
  }
  return s;
}

/// Hidden width whose parameter count comes closest to `budget`.
inline std::size_t mlp_hidden_for_budget(const ModalityRegistry& reg, std::size_t budget) {
  const std::size_t s = mlp_width_factor(reg);
  if (s == 0) throw ValidationError("mlp baseline: no tasks registered");
  return std::max<std::size_t>(1, (budget + s / 2) / s);
}

class MlpPredictor final : public Predictor {
 public:
  /// Hidden width picked so the parameter count is within 2% of `budget`.
  MlpPredictor(const ModalityRegistry& registry, std::size_t budget, double dropout_p, std::uint64_t seed)
      : MlpPredictor(registry, mlp_hidden_for_budget(registry, budget), dropout_p, seed, 0) {
    const double rel = std::abs(double(params_.count()) - double(budget)) / double(budget);
    if (rel > 0.02) {
      throw PreconditionError("mlp baseline cannot match the parameter budget: " + std::to_string(params_.count()) +
                              " vs " + std::to_string(budget));
    }
  }

  /// Explicit hidden width, no budget check.
  MlpPredictor(const ModalityRegistry& registry, std::size_t hidden, double dropout_p, std::uint64_t seed, int)
      : registry_(registry), hidden_(hidden), dropout_(dropout_p) {
    std::mt19937_64 rng(derive_seed(seed, {stream::kInit}));
    for (const auto& t : registry.tasks()) {
      const auto key = task_key(t);
      if (params_.contains("mlp." + key + ".w1")) continue;
      const auto din = registry.input_dim(t), dout = registry.output_dim(t);
      params_.add("mlp." + key + ".w1", normal_init({din, hidden}, 1.0 / std::sqrt(double(din)), rng));
      params_.add("mlp." + key + ".w2", normal_init({hidden, dout}, 1.0 / std::sqrt(double(hidden)), rng));
    }
  }

  std::size_t hidden() const { return hidden_; }
  const ParameterSet& parameters() const override { return params_; }
  ParameterSet& parameters() override { return params_; }
  std::string kind() const override { return "mlp"; }

  Prediction forward(const NArray& e_x, const TaskSpec& task, Mode mode, std::mt19937_64* rng) const override {
    detail::require_registered(registry_, task);
    const auto key = "mlp." + task_key(task);
    const bool vec = e_x.rank() == 1;
    auto x = detail::as_batch(e_x, registry_.input_dim(task), "mlp_baseline_forward");
    auto a = gelu(matmul(x, params_.get(key + ".w1")));
    if (mode == Mode::train && dropout_ > 0.0) {
      if (rng == nullptr) throw PreconditionError("mlp: train mode with dropout needs an rng");
      a = dropout(a, dropout_, *rng);
    }
    auto y = detail::unbatch(matmul(a, params_.get(key + ".w2")), vec);
    return Prediction{y, y, {}, {}};
  }

 private:
  ModalityRegistry registry_;
  std::size_t hidden_;
  double dropout_;
  ParameterSet params_;
};

/// One input_dim × output_dim matrix per task; the loss is convex in it.
class LinearPredictor final : public Predictor {
 public:
  LinearPredictor(const ModalityRegistry& registry, std::uint64_t seed) : registry_(registry) {
    std::mt19937_64 rng(derive_seed(seed, {stream::kInit}));
    for (const auto& t : registry.tasks()) {
      const auto name = "linear." + task_key(t) + ".w";
      if (params_.contains(name)) continue;
      const auto din = registry.input_dim(t);
      params_.add(name, normal_init({din, registry.output_dim(t)}, 1.0 / std::sqrt(double(din)), rng));
    }
  }

  const ParameterSet& parameters() const override { return params_; }
  ParameterSet& parameters() override { return params_; }
  std::string kind() const override { return "linear"; }

  Prediction forward(const NArray& e_x, const TaskSpec& task, Mode, std::mt19937_64*) const override {
    detail::require_registered(registry_, task);
    const auto name = "linear." + task_key(task) + ".w";
    auto y = matmul(e_x, params_.get(name));
    return Prediction{y, y, {}, {}};
  }

 private:
  ModalityRegistry registry_;
  ParameterSet params_;
};

}  // namespace m3jepa
