// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "m3jepa/core/seed.hpp"
#include "m3jepa/data/dataset.hpp"

namespace m3jepa {

/// Index-aligned per-modality slices of one minibatch.
struct Batch {
  std::vector<std::size_t> rows;
  std::vector<NArray> modality;  // indexed by modality id - 1

  std::size_t size() const { return rows.size(); }
  const NArray& of(int id) const { return modality.at(static_cast<std::size_t>(id - 1)); }
};

inline Batch make_batch(const Dataset& ds, std::vector<std::size_t> rows) {
  Batch b;
  for (const auto& m : ds.modalities) b.modality.push_back(ds.gather(m.id, rows));
  b.rows = std::move(rows);
  return b;
}

/// Row indices of every batch of one epoch over `split`, shuffled by (seed, epoch).
/// A trailing short batch is dropped when `drop_last` is set.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& ds, Split split, std::size_t batch_size,
                                                           std::uint64_t seed, std::uint64_t epoch,
                                                           bool drop_last) {
  const auto [begin, end] = ds.range(split);
  const std::size_t n = end - begin;
  if (batch_size == 0) throw PreconditionError("batch_size must be >= 1");
  if (batch_size > n) {
    throw PreconditionError("batch_size " + std::to_string(batch_size) + " exceeds " + to_string(split) +
                            " split size " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), begin);
  std::mt19937_64 rng(derive_seed(seed, {stream::kBatches, epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t stop = std::min(n, i + batch_size);
    if (stop - i < batch_size && drop_last) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

/// Endless seeded stream of batches; the k-th batch depends only on (seed, k).
class BatchStream {
 public:
  BatchStream(const Dataset& ds, Split split, std::size_t batch_size, std::uint64_t seed, bool contrastive)
      : ds_(&ds), split_(split), batch_size_(batch_size), seed_(seed), drop_last_(contrastive) {
    if (contrastive && batch_size < 2) {
      throw PreconditionError("batch_size must be >= 2 when the contrastive loss is active (in-batch negatives)");
    }
    per_epoch_ = epoch_batches(ds, split, batch_size, seed, 0, drop_last_).size();
  }

  std::size_t batches_per_epoch() const { return per_epoch_; }

  std::vector<std::size_t> indices(std::uint64_t k) {
    const std::uint64_t epoch = k / per_epoch_;
    if (epoch != cached_epoch_ || cache_.empty()) {
      cache_ = epoch_batches(*ds_, split_, batch_size_, seed_, epoch, drop_last_);
      cached_epoch_ = epoch;
    }
    return cache_[k % per_epoch_];
  }

  Batch batch(std::uint64_t k) { return make_batch(*ds_, indices(k)); }

 private:
  const Dataset* ds_;
  Split split_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool drop_last_;
  std::size_t per_epoch_ = 0;
  std::uint64_t cached_epoch_ = 0;
  std::vector<std::vector<std::size_t>> cache_;
};

}  // namespace m3jepa
