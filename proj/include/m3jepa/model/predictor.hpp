// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "m3jepa/core/ops.hpp"
#include "m3jepa/data/modality.hpp"
#include "m3jepa/model/parameters.hpp"

namespace m3jepa {

enum class Mode { train, eval };

/// Routing of one sample through one gate.
struct GateDecision {
  std::vector<double> logits;
  std::vector<double> dense_weights;
  std::vector<std::size_t> selected;     // by decreasing weight
  std::vector<double> renorm_weights;    // dense weights of `selected`, rescaled to sum to 1

  bool operator==(const GateDecision&) const = default;
};

/// Indices of the k largest entries, largest first; equal values go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> weights, std::size_t k) {
  if (k == 0 || k > weights.size()) {
    throw PreconditionError("top-k: K=" + std::to_string(k) + " outside [1, " + std::to_string(weights.size()) + "]");
  }
  std::vector<std::size_t> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  idx.resize(k);
  return idx;
}

/// Value-level routing from raw gate logits: softmax, top-K, renormalization.
inline GateDecision gate_decision_from_logits(std::span<const double> logits, std::size_t k) {
  GateDecision d;
  d.logits.assign(logits.begin(), logits.end());
  auto dense = softmax(NArray::vector(d.logits));
  d.dense_weights = dense.values();
  d.selected = top_k_indices(d.dense_weights, k);
  double total = 0.0;
  for (auto i : d.selected) total += d.dense_weights[i];
  for (auto i : d.selected) d.renorm_weights.push_back(d.dense_weights[i] / total);
  return d;
}

/// Gate-A output feeds the contrastive loss, gate-B output the regularization loss.
struct Prediction {
  NArray out_a;
  NArray out_b;
  std::vector<GateDecision> gate_a;  // one per sample; empty for predictors without gates
  std::vector<GateDecision> gate_b;
};

class Predictor {
 public:
  virtual ~Predictor() = default;

  /// `x` is B × input_dim(task) (or a single input_dim vector). `rng` drives
  /// dropout and is required in train mode when dropout is enabled.
  virtual Prediction forward(const NArray& x, const TaskSpec& task, Mode mode, std::mt19937_64* rng) const = 0;
  virtual const ParameterSet& parameters() const = 0;
  virtual ParameterSet& parameters() = 0;
  virtual std::string kind() const = 0;
};

namespace detail {

inline NArray as_batch(const NArray& x, std::size_t dim, const char* who) {
  if (x.cols() != dim || x.rank() > 2) {
    throw DimensionError(std::string(who) + ": input " + shape_str(x.shape()) + " does not match task input dim " +
                         std::to_string(dim));
  }
  return x.rank() == 1 ? reshape(x, Shape{1, dim}) : x;
}

inline void require_registered(const ModalityRegistry& reg, const TaskSpec& task) {
  for (const auto& t : reg.tasks())
    if (t == task) return;
  throw PreconditionError("task " + std::to_string(task.id) + " is not registered with this predictor");
}

inline NArray unbatch(const NArray& y, bool was_vector) { return was_vector ? reshape(y, Shape{y.cols()}) : y; }

}  // namespace detail

}  // namespace m3jepa
