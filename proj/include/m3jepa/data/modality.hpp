// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "m3jepa/core/error.hpp"

namespace m3jepa {

enum class ModalityKind : std::uint8_t { continuous = 0, one_hot = 1 };

inline const char* to_string(ModalityKind k) { return k == ModalityKind::one_hot ? "one_hot" : "continuous"; }

struct ModalitySpec {
  int id = 0;  // 1-based, contiguous
  std::string name;
  std::size_t dim = 0;
  ModalityKind kind = ModalityKind::continuous;

  bool operator==(const ModalitySpec&) const = default;
};

/// A directional task: concatenated input modalities predict concatenated output modalities.
/// Modality lists are kept in ascending id order, which is also the concatenation order.
struct TaskSpec {
  int id = 0;
  std::vector<int> inputs;
  std::vector<int> outputs;

  bool operator==(const TaskSpec&) const = default;
};

/// Sorted modality ids joined by '-', e.g. "1-3".
inline std::string modality_signature(std::vector<int> ids) {
  std::sort(ids.begin(), ids.end());
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "-" : "") + std::to_string(ids[i]);
  return s;
}

class ModalityRegistry {
 public:
  ModalityRegistry() = default;

  explicit ModalityRegistry(std::vector<ModalitySpec> modalities, std::vector<TaskSpec> tasks = {})
      : modalities_(std::move(modalities)), tasks_(std::move(tasks)) {
    std::sort(modalities_.begin(), modalities_.end(), [](auto& a, auto& b) { return a.id < b.id; });
    if (modalities_.empty()) throw ValidationError("modalities: at least one modality is required");
    for (std::size_t i = 0; i < modalities_.size(); ++i) {
      const auto& m = modalities_[i];
      if (m.id != static_cast<int>(i) + 1) {
        throw ValidationError("modalities: ids must be unique and contiguous from 1 (saw " + std::to_string(m.id) + ")");
      }
      if (m.dim == 0) throw ValidationError("modalities[" + std::to_string(m.id) + "].dim: must be >= 1");
    }
    std::set<int> task_ids;
    for (auto& t : tasks_) {
      const std::string where = "tasks[" + std::to_string(t.id) + "]";
      if (t.id < 1 || !task_ids.insert(t.id).second) throw ValidationError(where + ".id: must be unique and >= 1");
      canonicalize(t.inputs, where + ".input");
      canonicalize(t.outputs, where + ".output");
    }
  }

  std::size_t size() const { return modalities_.size(); }
  const std::vector<ModalitySpec>& modalities() const { return modalities_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }

  const ModalitySpec& modality(int id) const {
    if (id < 1 || id > static_cast<int>(modalities_.size())) {
      throw ValidationError("unknown modality id " + std::to_string(id));
    }
    return modalities_[static_cast<std::size_t>(id - 1)];
  }

  const TaskSpec& task(int id) const {
    for (const auto& t : tasks_)
      if (t.id == id) return t;
    throw ValidationError("unknown task id " + std::to_string(id));
  }

  std::size_t dim_of(const std::vector<int>& ids) const {
    std::size_t d = 0;
    for (int m : ids) d += modality(m).dim;
    return d;
  }
  std::size_t input_dim(const TaskSpec& t) const { return dim_of(t.inputs); }
  std::size_t output_dim(const TaskSpec& t) const { return dim_of(t.outputs); }

  /// Distinct input (or output) modality sets across tasks, by signature.
  std::vector<std::vector<int>> distinct_inputs() const { return distinct([](auto& t) { return t.inputs; }); }
  std::vector<std::vector<int>> distinct_outputs() const { return distinct([](auto& t) { return t.outputs; }); }

 private:
  void canonicalize(std::vector<int>& ids, const std::string& where) const {
    if (ids.empty()) throw ValidationError(where + ": modality set must be non-empty");
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
      throw ValidationError(where + ": duplicate modality id");
    }
    for (int m : ids) {
      if (m < 1 || m > static_cast<int>(modalities_.size())) {
        throw ValidationError(where + ": references unknown modality " + std::to_string(m));
      }
    }
  }

  template <typename F>
  std::vector<std::vector<int>> distinct(F pick) const {
    std::vector<std::vector<int>> out;
    for (const auto& t : tasks_) {
      auto ids = pick(t);
      if (std::find(out.begin(), out.end(), ids) == out.end()) out.push_back(ids);
    }
    return out;
  }

  std::vector<ModalitySpec> modalities_;
  std::vector<TaskSpec> tasks_;
};

}  // namespace m3jepa
