// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over NArray. Each op computes its forward value
// eagerly and, when a tape is active, records a backward rule that
// accumulates into the gradients of its inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "m3jepa/core/narray.hpp"

namespace m3jepa {

namespace detail {

inline void require_finite(const NArray& a, const char* op) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

inline void require_same_shape(const NArray& a, const NArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const NArray& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Scales the gelu derivative; 1.0 except under the gradcheck fault fixture.
inline thread_local double g_gelu_backward_fault = 1.0;

}  // namespace detail

/// Corrupts the gelu backward rule while alive. Test fixture for gradcheck.
class ScopedBackwardFault {
 public:
  explicit ScopedBackwardFault(double scale = 1.5) : prev_(detail::g_gelu_backward_fault) {
    detail::g_gelu_backward_fault = scale;
  }
  ~ScopedBackwardFault() { detail::g_gelu_backward_fault = prev_; }
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  double prev_;
};

/// Matrix product. Vectors are treated as a row (left operand) or a column
/// (right operand) and the added unit extent is dropped from the result.
inline NArray matmul(const NArray& a, const NArray& b) {
  if (a.rank() > 2 || b.rank() > 2) throw DimensionError("matmul: rank > 2 unsupported");
  const std::size_t m = a.rank() == 2 ? a.shape()[0] : 1;
  const std::size_t k = a.cols();
  const std::size_t kb = b.rank() == 2 ? b.shape()[0] : b.shape()[0];
  const std::size_t n = b.rank() == 2 ? b.shape()[1] : 1;
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) out_shape = {m, n};
  else if (a.rank() == 2) out_shape = {m};
  else if (b.rank() == 2) out_shape = {n};
  else out_shape = {1};
  NArray out(out_shape);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  record(out, {&a, &b}, [a, b, out, m, k, n]() mutable {
    const double* G = out.grad().data();
    const double* A = a.data().data();
    const double* B = b.data().data();
    if (a.requires_grad()) {
      double* GA = a.grad().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * n;
          const double* grow = G + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          GA[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      double* GB = b.grad().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

/// Same values under a new shape of equal size; gradient passes through.
inline NArray reshape(const NArray& a, Shape shape) {
  NArray out = a.reshaped(std::move(shape));
  record(out, {&a}, [a, out]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

inline NArray transpose(const NArray& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  NArray out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
  record(out, {&a}, [a, out, r, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return out;
}

inline NArray add(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "add");
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  record(out, {&a, &b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

inline NArray sub(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "sub");
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  record(out, {&a, &b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

/// Elementwise product.
inline NArray mul(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "mul");
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  record(out, {&a, &b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
    }
  });
  return out;
}

inline NArray scale(const NArray& a, double c) {
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  record(out, {&a}, [a, out, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
  return out;
}

/// Adds the vector `row` to every row of matrix `a`.
inline NArray add_row(const NArray& a, const NArray& row) {
  detail::require_rank(row, 1, "add_row");
  if (a.cols() != row.size()) {
    throw DimensionError("add_row: " + shape_str(a.shape()) + " + " + shape_str(row.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  NArray out(a.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = a.data()[i * c + j] + row.data()[j];
  record(out, {&a, &row}, [a, row, out, r, c]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (row.requires_grad()) {
      auto gr = row.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
  return out;
}

inline NArray sum(const NArray& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  NArray out = NArray::scalar(s);
  record(out, {&a}, [a, out]() mutable {
    const double g = out.grad()[0];
    for (auto& v : a.grad()) v += g;
  });
  return out;
}

inline NArray mean(const NArray& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Softmax along the last axis, max-shifted.
inline NArray softmax(const NArray& a) {
  detail::require_finite(a, "softmax");
  const std::size_t r = a.rows(), c = a.cols();
  NArray out(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    double* y = out.data().data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  record(out, {&a}, [a, out, r, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    auto y = out.data();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
  return out;
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

/// Exact erf-based GELU, x·Φ(x).
inline NArray gelu(const NArray& a) {
  detail::require_finite(a, "gelu");
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = gelu_scalar(a.data()[i]);
  record(out, {&a}, [a, out]() mutable {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
    const double fault = detail::g_gelu_backward_fault;
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (cdf + x * pdf) * fault;
    }
  });
  return out;
}

/// Inverted dropout: zeroes entries with probability p, scales survivors by 1/(1-p).
inline NArray dropout(const NArray& a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw PreconditionError("dropout: p must lie in [0,1)");
  if (p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(a.size());
  const double inv = 1.0 / (1.0 - p);
  for (auto& m : mask) m = keep(rng) ? inv : 0.0;
  NArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * mask[i];
  record(out, {&a}, [a, out, mask = std::move(mask)]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
  return out;
}

/// Cosine similarity of two vectors. Zero-norm input throws.
inline NArray cosine_sim(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "cosine_sim");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a.data()[i] * b.data()[i];
    aa += a.data()[i] * a.data()[i];
    bb += b.data()[i] * b.data()[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateVectorError("cosine_sim: zero-norm vector");
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double s = ab / (na * nb);
  NArray out = NArray::scalar(s);
  record(out, {&a, &b}, [a, b, out, na, nb, s, aa, bb]() mutable {
    const double g = out.grad()[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += g * (b.data()[i] / (na * nb) - s * a.data()[i] / aa);
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += g * (a.data()[i] / (na * nb) - s * b.data()[i] / bb);
    }
  });
  return out;
}

/// Squared Euclidean distance Σ(aᵢ−bᵢ)².
inline NArray sq_l2(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "sq_l2");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  NArray out = NArray::scalar(s);
  record(out, {&a, &b}, [a, b, out]() mutable {
    const double g = out.grad()[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * (a.data()[i] - b.data()[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= 2.0 * g * (a.data()[i] - b.data()[i]);
    }
  });
  return out;
}

/// Per-row squared distance of two B×d matrices → vector of B.
inline NArray row_sq_dist(const NArray& a, const NArray& b) {
  detail::require_same_shape(a, b, "row_sq_dist");
  const std::size_t r = a.rows(), c = a.cols();
  NArray out(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = a.data()[i * c + j] - b.data()[i * c + j];
      s += d * d;
    }
    out.data()[i] = s;
  }
  record(out, {&a, &b}, [a, b, out, r, c]() mutable {
    auto g = out.grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double d = 2.0 * g[i] * (a.data()[i * c + j] - b.data()[i * c + j]);
        if (a.requires_grad()) a.grad()[i * c + j] += d;
        if (b.requires_grad()) b.grad()[i * c + j] -= d;
      }
    }
  });
  return out;
}

/// Concatenates along the last axis. Parts must agree on every other extent.
inline NArray concat(const std::vector<NArray>& parts) {
  if (parts.empty()) throw PreconditionError("concat: empty part list");
  const std::size_t rank = parts.front().rank();
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank || p.rows() != r) {
      throw DimensionError("concat: incompatible part " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  if (parts.size() == 1) return parts.front();
  NArray out(rank == 2 ? Shape{r, total} : Shape{total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data().data() + i * total + off);
    off += c;
  }
  record(out, parts, [parts, out, r, total]() mutable {
    auto g = out.grad();
    std::size_t off = 0;
    for (auto& p : parts) {
      const std::size_t c = p.cols();
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
      }
      off += c;
    }
  });
  return out;
}

/// Selects rows of a matrix; indices may repeat.
inline NArray gather_rows(const NArray& a, const std::vector<std::size_t>& idx) {
  detail::require_rank(a, 2, "gather_rows");
  if (idx.empty()) throw PreconditionError("gather_rows: empty index list");
  const std::size_t c = a.cols();
  NArray out(Shape{idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(a.data().data() + idx[i] * c, c, out.data().data() + i * c);
  }
  record(out, {&a}, [a, out, idx, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
  });
  return out;
}

/// out[b][k] = a[b][idx[b][k]].
inline NArray take_along_rows(const NArray& a, const std::vector<std::vector<std::size_t>>& idx) {
  detail::require_rank(a, 2, "take_along_rows");
  if (idx.size() != a.rows() || idx.empty()) throw DimensionError("take_along_rows: row count mismatch");
  const std::size_t k = idx.front().size();
  const std::size_t c = a.cols();
  NArray out(Shape{idx.size(), k});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b].size() != k) throw DimensionError("take_along_rows: ragged index");
    for (std::size_t j = 0; j < k; ++j) {
      if (idx[b][j] >= c) throw DimensionError("take_along_rows: index out of range");
      out.data()[b * k + j] = a.data()[b * c + idx[b][j]];
    }
  }
  record(out, {&a}, [a, out, idx, k, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t j = 0; j < k; ++j) ga[b * c + idx[b][j]] += g[b * k + j];
  });
  return out;
}

/// Divides each row by its sum. Rows must have a positive sum.
inline NArray normalize_rows_l1(const NArray& a) {
  const std::size_t r = a.rows(), c = a.cols();
  NArray out(a.shape());
  std::vector<double> sums(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.data()[i * c + j];
    if (!(s > 0.0)) throw NumericError("normalize_rows_l1: row sum must be positive");
    sums[i] = s;
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = a.data()[i * c + j] / s;
  }
  record(out, {&a}, [a, out, sums, r, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    auto y = out.data();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - dot) / sums[i];
    }
  });
  return out;
}

/// Scales each row to unit Euclidean norm. Zero rows throw.
inline NArray normalize_rows_l2(const NArray& a) {
  const std::size_t r = a.rows(), c = a.cols();
  NArray out(a.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.data()[i * c + j] * a.data()[i * c + j];
    if (s == 0.0) throw DegenerateVectorError("normalize_rows_l2: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = a.data()[i * c + j] / norms[i];
  }
  record(out, {&a}, [a, out, norms, r, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    auto y = out.data();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - dot * y[i * c + j]) / norms[i];
    }
  });
  return out;
}

/// Mean over rows of −log softmax(logits[i])[target[i]], via log-sum-exp.
inline NArray cross_entropy(const NArray& logits, const std::vector<std::size_t>& target) {
  detail::require_rank(logits, 2, "cross_entropy");
  detail::require_finite(logits, "cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (target.size() != r) throw DimensionError("cross_entropy: target count mismatch");
  std::vector<double> probs(r * c);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = logits.data().data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(x[j] - lse);
    total += lse - x[target[i]];
  }
  NArray out = NArray::scalar(total / static_cast<double>(r));
  record(out, {&logits}, [logits, out, probs = std::move(probs), target, r, c]() mutable {
    const double g = out.grad()[0] / static_cast<double>(r);
    auto gl = logits.grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
      gl[i * c + target[i]] -= g;
    }
  });
  return out;
}

/// One (expert, row-within-that-expert's-output) reference per routed slot.
struct Route {
  std::size_t expert;
  std::size_t row;
};

/// out[b] = Σ_k weights[b][k] · expert_outputs[route(b,k).expert][route(b,k).row].
/// `routes` is row-major B×K; `expert_outputs` entries for unused experts may be undefined.
inline NArray mix_experts(const std::vector<NArray>& expert_outputs, const NArray& weights,
                          const std::vector<Route>& routes) {
  detail::require_rank(weights, 2, "mix_experts");
  const std::size_t batch = weights.rows(), k = weights.cols();
  if (routes.size() != batch * k) throw DimensionError("mix_experts: route count mismatch");
  std::size_t h = 0;
  for (const auto& r : routes) {
    if (r.expert >= expert_outputs.size() || !expert_outputs[r.expert].defined()) {
      throw DimensionError("mix_experts: route to a missing expert output");
    }
    h = expert_outputs[r.expert].cols();
  }
  NArray out(Shape{batch, h});
  for (std::size_t b = 0; b < batch; ++b) {
    double* o = out.data().data() + b * h;
    for (std::size_t j = 0; j < k; ++j) {
      const Route& r = routes[b * k + j];
      const double w = weights.data()[b * k + j];
      const double* y = expert_outputs[r.expert].data().data() + r.row * h;
      for (std::size_t d = 0; d < h; ++d) o[d] += w * y[d];
    }
  }
  std::vector<NArray> inputs;
  inputs.push_back(weights);
  for (const auto& e : expert_outputs)
    if (e.defined()) inputs.push_back(e);
  record(out, inputs, [expert_outputs, weights, routes, out, batch, k, h]() mutable {
    auto g = out.grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const double* go = g.data() + b * h;
      for (std::size_t j = 0; j < k; ++j) {
        const Route& r = routes[b * k + j];
        const NArray& y = expert_outputs[r.expert];
        const double* yr = y.data().data() + r.row * h;
        if (weights.requires_grad()) {
          double acc = 0.0;
          for (std::size_t d = 0; d < h; ++d) acc += go[d] * yr[d];
          weights.grad()[b * k + j] += acc;
        }
        if (y.requires_grad()) {
          const double w = weights.data()[b * k + j];
          double* gy = y.grad().data() + r.row * h;
          for (std::size_t d = 0; d < h; ++d) gy[d] += w * go[d];
        }
      }
    }
  });
  return out;
}

}  // namespace m3jepa
