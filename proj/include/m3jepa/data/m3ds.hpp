// SPDX-License-Identifier: Apache-2.0
//
// M3DS dataset file, little-endian:
//   "M3DS" | u32 version=1 | u32 M
//   M × { u16 name_len | name (UTF-8) | u32 dim | u8 kind }
//   u64 num_samples | u64 train_end | u64 val_end
//   M × num_samples × dim f32, row-major, declaration order
// Values are stored as f32 and widened to f64 on load.
#pragma once

#include <string>

#include "m3jepa/core/binio.hpp"
#include "m3jepa/data/dataset.hpp"

namespace m3jepa {

inline constexpr std::uint32_t kM3dsVersion = 1;

inline binio::Writer encode_dataset(const Dataset& ds) {
  binio::Writer w;
  w.put_bytes("M3DS");
  w.put<std::uint32_t>(kM3dsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.modalities.size()));
  for (const auto& m : ds.modalities) {
    if (m.name.size() > 0xFFFF) throw FormatError("modality name too long: " + m.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(m.name.size()));
    w.put_bytes(m.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.kind));
  }
  w.put<std::uint64_t>(ds.num_samples);
  w.put<std::uint64_t>(ds.train_end);
  w.put<std::uint64_t>(ds.val_end);
  for (const auto& block : ds.embeddings)
    for (double v : block) w.put<float>(static_cast<float>(v));
  return w;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { encode_dataset(ds).write_file(path); }

inline Dataset decode_dataset(binio::Reader& r) {
  if (r.remaining() < 4 || r.get_bytes(4) != "M3DS") throw FormatError("not an M3DS file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kM3dsVersion) throw FormatError("unsupported M3DS version " + std::to_string(version));
  Dataset ds;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ModalitySpec m;
    m.id = static_cast<int>(i) + 1;
    m.name = r.get_bytes(r.get<std::uint16_t>());
    m.dim = r.get<std::uint32_t>();
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw FormatError("unknown modality kind " + std::to_string(kind));
    if (m.dim == 0) throw FormatError("modality '" + m.name + "' has zero dim");
    m.kind = static_cast<ModalityKind>(kind);
    ds.modalities.push_back(std::move(m));
  }
  ds.num_samples = r.get<std::uint64_t>();
  ds.train_end = r.get<std::uint64_t>();
  ds.val_end = r.get<std::uint64_t>();
  if (ds.train_end > ds.val_end || ds.val_end > ds.num_samples) throw FormatError("inconsistent split boundaries");
  std::uint64_t floats = 0;
  for (const auto& m : ds.modalities) floats += ds.num_samples * m.dim;
  r.need(static_cast<std::size_t>(floats * sizeof(float)));
  for (const auto& m : ds.modalities) {
    std::vector<double> block(ds.num_samples * m.dim);
    for (auto& v : block) v = static_cast<double>(r.get<float>());
    ds.embeddings.push_back(std::move(block));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after M3DS payload");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return decode_dataset(r);
}

/// Values rounded through f32, as a save/load cycle would leave them.
inline Dataset quantized(Dataset ds) {
  for (auto& block : ds.embeddings)
    for (auto& v : block) v = static_cast<double>(static_cast<float>(v));
  return ds;
}

}  // namespace m3jepa
