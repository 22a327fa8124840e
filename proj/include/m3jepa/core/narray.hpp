// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 arrays with an attached gradient buffer, and the
// tape that records differentiable operations for reverse-mode evaluation.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "m3jepa/core/error.hpp"

namespace m3jepa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  // True for arrays not produced by a recorded op (parameters, inputs).
  bool leaf = true;
};

}  // namespace detail

/// Handle to a dense array. Copies share storage; use clone() for a deep copy.
class NArray {
 public:
  NArray() = default;

  explicit NArray(Shape shape, double fill = 0.0) : s_(std::make_shared<detail::Storage>()) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("NArray extents must be positive, got " + shape_str(shape));
    }
    s_->data.assign(shape_size(shape), fill);
    s_->shape = std::move(shape);
  }

  NArray(Shape shape, std::vector<double> values) : s_(std::make_shared<detail::Storage>()) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("NArray shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static NArray scalar(double v) { return NArray(Shape{1}, std::vector<double>{v}); }
  static NArray vector(std::vector<double> v) {
    const auto n = v.size();
    return NArray(Shape{n}, std::move(v));
  }
  static NArray matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return NArray(Shape{rows, cols}, std::move(v));
  }
  static NArray identity(std::size_t n) {
    NArray out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) out.data()[i * n + i] = 1.0;
    return out;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }
  /// Leading extent for matrices; 1 for vectors.
  std::size_t rows() const { return rank() == 2 ? s_->shape[0] : 1; }
  /// Trailing extent.
  std::size_t cols() const { return s_->shape.back(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  std::vector<double>& values() { return s_->data; }
  const std::vector<double>& values() const { return s_->data; }

  double& at(std::size_t i) { return s_->data[i]; }
  double at(std::size_t i) const { return s_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar array " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on) ensure_grad();
  }
  bool is_leaf() const { return s_->leaf; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, allocated on first access. Handles share it.
  std::span<double> grad() const {
    ensure_grad();
    return s_->grad;
  }
  void zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
  }

  NArray clone() const {
    NArray out(shape(), s_->data);
    out.s_->requires_grad = s_->requires_grad;
    if (out.s_->requires_grad) out.ensure_grad();
    return out;
  }
  /// Same values, no gradient link.
  NArray detach() const { return NArray(shape(), s_->data); }

  NArray reshaped(Shape shape) const {
    auto out = detach();
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    out.s_->shape = std::move(shape);
    return out;
  }

  bool same_storage(const NArray& other) const { return s_ == other.s_; }
  const void* id() const { return s_.get(); }

  void ensure_grad() const {
    if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), 0.0);
  }

 private:
  friend class Tape;
  friend void mark_result(NArray&);
  std::shared_ptr<detail::Storage> s_;
};

/// Ordered record of executed operations. Backward rules replay in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

  void note_leaf(const NArray& a) {
    if (a.is_leaf() && a.requires_grad() && leaf_ids_.insert(a.id()).second) leaves_.push_back(a);
  }

  /// Learnable leaves that participated in at least one recorded op.
  const std::vector<NArray>& leaves() const { return leaves_; }
  bool touched(const NArray& a) const { return leaf_ids_.contains(a.id()); }
  std::size_t size() const { return rules_.size(); }

  void backward(NArray loss) {
    if (loss.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) {
      throw PreconditionError("backward(): loss was not produced on the active tape");
    }
    loss.grad()[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

  void clear() {
    rules_.clear();
    leaves_.clear();
    leaf_ids_.clear();
  }

 private:
  std::vector<std::function<void()>> rules_;
  std::vector<NArray> leaves_;
  std::unordered_set<const void*> leaf_ids_;
};

namespace detail {
inline thread_local Tape* g_active_tape = nullptr;
}

inline Tape* active_tape() { return detail::g_active_tape; }

/// Makes a tape active for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::g_active_tape) { detail::g_active_tape = &tape; }
  ~TapeScope() { detail::g_active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording, e.g. for evaluation forwards inside a training loop.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::g_active_tape) { detail::g_active_tape = nullptr; }
  ~NoGradScope() { detail::g_active_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

inline void mark_result(NArray& out) {
  out.s_->leaf = false;
  out.s_->requires_grad = true;
  out.ensure_grad();
}

/// Records `rule` when a tape is active and any input needs a gradient.
/// Returns true when recorded; `out` is then marked differentiable.
inline bool record(NArray& out, std::initializer_list<const NArray*> inputs, std::function<void()> rule) {
  Tape* tape = active_tape();
  if (tape == nullptr) return false;
  bool needed = false;
  for (const NArray* in : inputs) needed = needed || in->requires_grad();
  if (!needed) return false;
  for (const NArray* in : inputs) tape->note_leaf(*in);
  mark_result(out);
  tape->record(std::move(rule));
  return true;
}

inline bool record(NArray& out, const std::vector<NArray>& inputs, std::function<void()> rule) {
  Tape* tape = active_tape();
  if (tape == nullptr) return false;
  bool needed = false;
  for (const auto& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return false;
  for (const auto& in : inputs) tape->note_leaf(in);
  mark_result(out);
  tape->record(std::move(rule));
  return true;
}

}  // namespace m3jepa
