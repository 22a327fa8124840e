// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "m3jepa/core/narray.hpp"

namespace m3jepa {

/// Named learnable arrays in registration order.
class ParameterSet {
 public:
  NArray& add(const std::string& name, NArray value) {
    if (index_.contains(name)) throw PreconditionError("duplicate parameter name " + name);
    value.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const NArray& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw PreconditionError("no parameter named " + name);
    return entries_[it->second].second;
  }
  NArray& get(const std::string& name) {
    return const_cast<NArray&>(static_cast<const ParameterSet&>(*this).get(name));
  }

  const std::vector<std::pair<std::string, NArray>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, NArray>>& entries() { return entries_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, NArray>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Entries drawn from N(0, stddev²).
inline NArray normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  NArray out(std::move(shape));
  for (auto& v : out.data()) v = dist(rng);
  return out;
}

}  // namespace m3jepa
