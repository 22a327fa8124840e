// SPDX-License-Identifier: Apache-2.0
//
// Paired multi-modality datasets drawn from a shared Gaussian latent. Each
// continuous modality is a fixed random projection of the latent plus noise,
// scaled to unit norm; a one_hot modality carries the argmax of a fixed
// linear readout of the latent as a class indicator.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "m3jepa/core/narray.hpp"
#include "m3jepa/core/ops.hpp"
#include "m3jepa/core/seed.hpp"
#include "m3jepa/data/modality.hpp"

namespace m3jepa {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct SynthConfig {
  std::size_t latent_dim = 16;
  double noise_std = 0.0;
  /// Per-modality override of noise_std, keyed by modality id.
  std::map<int, double> noise_override;
  std::size_t num_train = 0;
  std::size_t num_val = 0;
  std::size_t num_test = 0;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;

  double noise_for(int modality) const {
    auto it = noise_override.find(modality);
    return it == noise_override.end() ? noise_std : it->second;
  }
  std::size_t num_samples() const { return num_train + num_val + num_test; }
};

/// Index-aligned per-modality embeddings; row i across modalities is one positive tuple.
struct Dataset {
  std::vector<ModalitySpec> modalities;
  /// One num_samples × dim row-major block per modality, in declaration order.
  std::vector<std::vector<double>> embeddings;
  std::uint64_t num_samples = 0;
  std::uint64_t train_end = 0;
  std::uint64_t val_end = 0;

  bool operator==(const Dataset&) const = default;

  const ModalitySpec& spec(int id) const { return modalities.at(static_cast<std::size_t>(id - 1)); }

  std::pair<std::size_t, std::size_t> range(Split s) const {
    switch (s) {
      case Split::train: return {0, train_end};
      case Split::val: return {train_end, val_end};
      case Split::test: return {val_end, num_samples};
    }
    return {0, 0};
  }
  std::size_t split_size(Split s) const {
    auto [b, e] = range(s);
    return e - b;
  }

  std::span<const double> row(int modality, std::size_t i) const {
    const auto d = spec(modality).dim;
    return std::span<const double>(embeddings[static_cast<std::size_t>(modality - 1)]).subspan(i * d, d);
  }

  /// Rows of one modality gathered into a |rows| × dim array.
  NArray gather(int modality, const std::vector<std::size_t>& rows) const {
    const auto d = spec(modality).dim;
    NArray out(Shape{rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = row(modality, rows[r]);
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return out;
  }

  /// Class index of a one_hot row.
  std::size_t label(int modality, std::size_t i) const {
    auto r = row(modality, i);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
};

/// Fixed mixing map of a continuous modality: dim × latent_dim with unit-norm rows.
inline std::vector<double> mixing_matrix(const SynthConfig& cfg, const ModalitySpec& m) {
  std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kMixing, static_cast<std::uint64_t>(m.id)}));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> a(m.dim * cfg.latent_dim);
  for (std::size_t r = 0; r < m.dim; ++r) {
    double norm = 0.0;
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
      const double v = n01(rng);
      a[r * cfg.latent_dim + c] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) a[r * cfg.latent_dim + c] /= norm;
  }
  return a;
}

/// Fixed class readout: num_classes × latent_dim.
inline std::vector<double> readout_matrix(const SynthConfig& cfg) {
  std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kReadout}));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> r(cfg.num_classes * cfg.latent_dim);
  for (auto& v : r) v = n01(rng);
  return r;
}

/// Samples a dataset; identical (cfg, registry) gives bit-identical output.
inline Dataset generate(const SynthConfig& cfg, const ModalityRegistry& registry) {
  if (cfg.latent_dim == 0) throw ValidationError("synth.latent_dim: must be >= 1");
  if (cfg.num_samples() == 0) throw ValidationError("synth: num_samples must be >= 1");
  if (cfg.noise_std < 0.0) throw ValidationError("synth.noise_std: must be >= 0");
  for (const auto& [id, v] : cfg.noise_override) {
    if (v < 0.0) throw ValidationError("modalities[" + std::to_string(id) + "].noise_std: must be >= 0");
  }
  for (const auto& m : registry.modalities()) {
    if (m.kind == ModalityKind::one_hot) {
      if (cfg.num_classes == 0) throw ValidationError("synth.num_classes: required by one_hot modality " + m.name);
      if (m.dim != cfg.num_classes) {
        throw ValidationError("modalities[" + std::to_string(m.id) + "].dim: one_hot dim must equal num_classes");
      }
    }
  }

  const std::size_t n = cfg.num_samples();
  const std::size_t L = cfg.latent_dim;
  Dataset ds;
  ds.modalities = registry.modalities();
  ds.num_samples = n;
  ds.train_end = cfg.num_train;
  ds.val_end = cfg.num_train + cfg.num_val;

  std::vector<std::vector<double>> maps;
  for (const auto& m : ds.modalities)
    maps.push_back(m.kind == ModalityKind::continuous ? mixing_matrix(cfg, m) : std::vector<double>{});
  const auto readout = cfg.num_classes ? readout_matrix(cfg) : std::vector<double>{};

  std::mt19937_64 rng(derive_seed(cfg.seed, {stream::kSamples}));
  std::normal_distribution<double> n01(0.0, 1.0);
  for (const auto& m : ds.modalities) ds.embeddings.emplace_back(n * m.dim, 0.0);

  std::vector<double> z(L);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : z) v = n01(rng);
    for (std::size_t mi = 0; mi < ds.modalities.size(); ++mi) {
      const auto& m = ds.modalities[mi];
      double* e = ds.embeddings[mi].data() + i * m.dim;
      if (m.kind == ModalityKind::one_hot) {
        std::size_t best = 0;
        double best_v = -INFINITY;
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
          double s = 0.0;
          for (std::size_t k = 0; k < L; ++k) s += readout[c * L + k] * z[k];
          if (s > best_v) best_v = s, best = c;
        }
        e[best] = 1.0;
        continue;
      }
      const double sigma = cfg.noise_for(m.id);
      double norm = 0.0;
      for (std::size_t r = 0; r < m.dim; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < L; ++k) s += maps[mi][r * L + k] * z[k];
        if (sigma > 0.0) s += sigma * n01(rng);
        e[r] = s;
        norm += s * s;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) throw NumericError("generate: zero-norm embedding sample");
      for (std::size_t r = 0; r < m.dim; ++r) e[r] /= norm;
    }
  }
  return ds;
}

/// Trainable square maps atop the frozen encoder outputs, one per modality.
/// Row-vector convention: a batch E (B × d) maps to E · W. Initialized to identity.
class AdapterSet {
 public:
  AdapterSet() = default;
  explicit AdapterSet(const ModalityRegistry& registry) {
    for (const auto& m : registry.modalities()) {
      NArray w = NArray::identity(m.dim);
      w.set_requires_grad(true);
      maps_.emplace(m.id, std::move(w));
    }
  }

  bool enabled() const { return !maps_.empty(); }
  const NArray* find(int modality) const {
    auto it = maps_.find(modality);
    return it == maps_.end() ? nullptr : &it->second;
  }
  std::map<int, NArray>& maps() { return maps_; }
  const std::map<int, NArray>& maps() const { return maps_; }

 private:
  std::map<int, NArray> maps_;
};

/// e·W when an adapter is given, e unchanged (and nothing recorded) otherwise.
inline NArray adapter_apply(const NArray& e, const NArray* adapter) {
  if (adapter == nullptr) return e;
  if (adapter->rank() != 2 || adapter->shape()[0] != e.cols() || adapter->shape()[1] != e.cols()) {
    throw DimensionError("adapter_apply: adapter " + shape_str(adapter->shape()) + " does not fit embedding " +
                         shape_str(e.shape()));
  }
  return matmul(e, *adapter);
}

}  // namespace m3jepa
