// SPDX-License-Identifier: Apache-2.0
//
// A predictor together with the optional per-modality adapters that sit on
// top of the frozen encoder outputs.
#pragma once

#include <memory>

#include "m3jepa/data/batch.hpp"
#include "m3jepa/model/predictor.hpp"

namespace m3jepa {

class Model {
 public:
  Model(ModalityRegistry registry, std::unique_ptr<Predictor> predictor, bool adapters)
      : registry_(std::move(registry)), predictor_(std::move(predictor)) {
    if (adapters) adapters_ = AdapterSet(registry_);
  }

  const ModalityRegistry& registry() const { return registry_; }
  const Predictor& predictor() const { return *predictor_; }
  Predictor& predictor() { return *predictor_; }
  const AdapterSet& adapters() const { return adapters_; }

  /// Embedding of one modality after its adapter (if any).
  NArray embed(const NArray& e, int modality) const { return adapter_apply(e, adapters_.find(modality)); }

  /// Concatenated, adapted input embeddings of a batch for `task`.
  NArray input(const Batch& b, const TaskSpec& task) const { return join(b, task.inputs); }

  /// Concatenated, adapted target embeddings with no gradient link.
  NArray target(const Batch& b, const TaskSpec& task) const {
    NoGradScope off;
    return join(b, task.outputs).detach();
  }

  Prediction forward(const Batch& b, const TaskSpec& task, Mode mode, std::mt19937_64* rng) const {
    return predictor_->forward(input(b, task), task, mode, rng);
  }

  /// Every learnable tensor by checkpoint name: predictor parameters then "adapter.{m}".
  std::vector<std::pair<std::string, NArray>> named_parameters() const {
    auto out = predictor_->parameters().entries();
    for (const auto& [m, w] : adapters_.maps()) out.emplace_back("adapter." + std::to_string(m), w);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : named_parameters()) n += p.size();
    return n;
  }

 private:
  NArray join(const Batch& b, const std::vector<int>& ids) const {
    std::vector<NArray> parts;
    for (int m : ids) parts.push_back(embed(b.of(m), m));
    return concat(parts);
  }

  ModalityRegistry registry_;
  std::unique_ptr<Predictor> predictor_;
  AdapterSet adapters_;
};

}  // namespace m3jepa
