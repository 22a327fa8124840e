// SPDX-License-Identifier: Apache-2.0
//
// M3JP checkpoint file, little-endian:
//   "M3JP" | u32 version=1 | u32 json_len | config JSON (UTF-8)
//   u32 count | count × tensor
//   u64 step | u32 rng_len | rng state bytes
//   u32 count | count × tensor          optimizer state
// tensor := u16 name_len | name | u8 rank | rank × u32 dim | f32 data
// Optimizer state tensors are "adam.m.<name>", "adam.v.<name>" and the
// one-element step counter "adam.t.<name>".
#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "m3jepa/core/binio.hpp"
#include "m3jepa/model/model.hpp"
#include "m3jepa/train/adam.hpp"

namespace m3jepa {

inline constexpr std::uint32_t kM3jpVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::string config_json;
  std::vector<NamedTensor> tensors;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<NamedTensor> optimizer;

  bool operator==(const Checkpoint&) const = default;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_tensor(binio::Writer& w, const NamedTensor& t) {
  if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name);
  if (t.shape.size() > 0xFF) throw FormatError("tensor rank too large: " + t.name);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
  w.put_bytes(t.name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
  for (auto d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (double v : t.data) w.put<float>(static_cast<float>(v));
}

inline NamedTensor get_tensor(binio::Reader& r) {
  NamedTensor t;
  t.name = r.get_bytes(r.get<std::uint16_t>());
  const auto rank = r.get<std::uint8_t>();
  for (std::uint8_t i = 0; i < rank; ++i) t.shape.push_back(r.get<std::uint32_t>());
  const auto n = shape_size(t.shape);
  r.need(n * sizeof(float));
  t.data.resize(n);
  for (auto& v : t.data) v = static_cast<double>(r.get<float>());
  return t;
}

inline std::string rng_bytes(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace detail

inline binio::Writer encode_checkpoint(const Checkpoint& c) {
  binio::Writer w;
  w.put_bytes("M3JP");
  w.put<std::uint32_t>(kM3jpVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.config_json.size()));
  w.put_bytes(c.config_json);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) detail::put_tensor(w, t);
  w.put<std::uint64_t>(c.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.rng_state.size()));
  w.put_bytes(c.rng_state);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& t : c.optimizer) detail::put_tensor(w, t);
  return w;
}

inline Checkpoint decode_checkpoint(binio::Reader& r) {
  if (r.remaining() < 4 || r.get_bytes(4) != "M3JP") throw FormatError("not an M3JP checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kM3jpVersion) throw FormatError("unsupported M3JP version " + std::to_string(version));
  Checkpoint c;
  c.config_json = r.get_bytes(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) c.tensors.push_back(detail::get_tensor(r));
  c.step = r.get<std::uint64_t>();
  c.rng_state = r.get_bytes(r.get<std::uint32_t>());
  const auto moments = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < moments; ++i) c.optimizer.push_back(detail::get_tensor(r));
  if (r.remaining() != 0) throw FormatError("trailing bytes after M3JP payload");
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) { encode_checkpoint(c).write_file(path); }

inline Checkpoint read_checkpoint(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return decode_checkpoint(r);
}

/// Optimizer, step counter and dropout stream of a training run.
struct TrainState {
  std::uint64_t step = 0;
  std::map<std::string, AdamMoments> moments;
  std::map<int, double> rolling;  // per-task exponential moving average of the total loss
  std::mt19937_64 rng;

  bool operator==(const TrainState&) const = default;
};

inline Checkpoint make_checkpoint(const Model& model, const TrainState& state, std::string config_json) {
  Checkpoint c;
  c.config_json = std::move(config_json);
  for (const auto& [name, p] : model.named_parameters()) c.tensors.push_back({name, p.shape(), p.values()});
  c.step = state.step;
  c.rng_state = detail::rng_bytes(state.rng);
  for (const auto& [name, s] : state.moments) {
    const Shape shape{s.m.size()};
    c.optimizer.push_back({"adam.m." + name, shape, s.m});
    c.optimizer.push_back({"adam.v." + name, shape, s.v});
    c.optimizer.push_back({"adam.t." + name, Shape{1}, {static_cast<double>(s.t)}});
  }
  return c;
}

inline void save_checkpoint(const Model& model, const TrainState& state, const std::string& config_json,
                            const std::string& path) {
  write_checkpoint(make_checkpoint(model, state, config_json), path);
}

/// Copies parameter values into `model`; every model tensor must be present with its exact shape.
inline void restore_parameters(const Checkpoint& c, Model& model) {
  const auto params = model.named_parameters();
  for (const auto& [name, p] : params) {
    const NamedTensor* t = c.find(name);
    if (t == nullptr) throw DimensionError("checkpoint has no tensor '" + name + "' required by the model");
    if (t->shape != p.shape()) {
      throw DimensionError("tensor '" + name + "': checkpoint shape " + shape_str(t->shape) + " vs model shape " +
                           shape_str(p.shape()));
    }
  }
  if (c.tensors.size() != params.size()) {
    for (const auto& t : c.tensors) {
      bool known = false;
      for (const auto& [name, _] : params) known = known || name == t.name;
      if (!known) throw DimensionError("checkpoint tensor '" + t.name + "' is not part of the model");
    }
  }
  for (auto [name, p] : params) {
    const auto& src = c.find(name)->data;
    std::copy(src.begin(), src.end(), p.data().begin());
  }
}

inline TrainState restore_state(const Checkpoint& c) {
  TrainState s;
  s.step = c.step;
  std::istringstream is(c.rng_state);
  is >> s.rng;
  if (!is) throw FormatError("checkpoint rng state is unreadable");
  for (const auto& t : c.optimizer) {
    auto split = [&](const char* prefix) -> std::string {
      const std::string p(prefix);
      return t.name.rfind(p, 0) == 0 ? t.name.substr(p.size()) : std::string();
    };
    if (auto n = split("adam.m."); !n.empty()) s.moments[n].m = t.data;
    else if (auto n2 = split("adam.v."); !n2.empty()) s.moments[n2].v = t.data;
    else if (auto n3 = split("adam.t."); !n3.empty()) s.moments[n3].t = static_cast<std::uint64_t>(t.data.at(0));
    else throw FormatError("unknown optimizer tensor '" + t.name + "'");
  }
  return s;
}

}  // namespace m3jepa
