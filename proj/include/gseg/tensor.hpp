#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gseg/error.hpp"
#include "gseg/random.hpp"

namespace gseg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-d array (NCHW for images/activations) with an optional
/// gradient buffer. Copies share storage; operations never mutate their
/// inputs' data, only `grad` is accumulated into.
///
/// The gradient lives behind a shared cell so that lazy allocation is seen
/// by every copy of the tensor (tape closures capture copies). Mark leaves
/// with requires_grad BEFORE recording operations on them.
template <typename T>
struct Tensor {
  using GradCell = std::shared_ptr<std::vector<T>>;

  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<GradCell> grad = std::make_shared<GradCell>();
  bool requires_grad = false;

  // provenance: tape that produced this tensor, if any
  const void* tape_id = nullptr;
  int node_index = -1;

  Tensor() = default;

  std::size_t numel() const { return data ? data->size() : 0; }
  int dim(std::size_t i) const { return shape[i]; }
  std::size_t rank() const { return shape.size(); }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }

  T& operator[](std::size_t i) { return (*data)[i]; }
  const T& operator[](std::size_t i) const { return (*data)[i]; }

  /// Scalar value of a one-element tensor.
  T value() const {
    if (numel() != 1) {
      throw ValueError("value() requires a scalar tensor, got shape " +
                       shape_str(shape));
    }
    return (*data)[0];
  }

  bool has_grad() const { return grad && *grad != nullptr; }

  /// Lazily allocates the zero-filled gradient buffer (shared by copies).
  std::vector<T>& ensure_grad() const {
    if (!*grad) *grad = std::make_shared<std::vector<T>>(numel(), T(0));
    return **grad;
  }

  std::vector<T>& grad_data() const {
    if (!has_grad()) throw ValueError("tensor has no gradient buffer");
    return **grad;
  }

  void zero_grad() {
    if (has_grad()) std::fill((*grad)->begin(), (*grad)->end(), T(0));
  }

  bool all_finite() const {
    for (T v : *data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename T>
Tensor<T> zeros(const Shape& shape) {
  Tensor<T> t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<T>>(shape_numel(shape), T(0));
  return t;
}

template <typename T>
Tensor<T> full(const Shape& shape, T fill) {
  Tensor<T> t = zeros<T>(shape);
  std::fill(t.data->begin(), t.data->end(), fill);
  return t;
}

template <typename T>
Tensor<T> from_vector(const Shape& shape, std::vector<T> values) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  Tensor<T> t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<T>>(std::move(values));
  return t;
}

template <typename T>
Tensor<T> rand_uniform(const Shape& shape, T lo, T hi, Rng& rng) {
  Tensor<T> t = zeros<T>(shape);
  for (T& v : *t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Deep copy (fresh storage and grad cell, no tape provenance).
template <typename T>
Tensor<T> clone(const Tensor<T>& a) {
  Tensor<T> t;
  t.shape = a.shape;
  t.data = std::make_shared<std::vector<T>>(*a.data);
  t.requires_grad = a.requires_grad;
  return t;
}

/// Elementwise dtype conversion (used by the f64 verification path).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  Tensor<To> t = zeros<To>(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i)
    (*t.data)[i] = static_cast<To>((*a.data)[i]);
  t.requires_grad = a.requires_grad;
  return t;
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) {
    throw ValueError(std::string(op) + ": non-finite value in output tensor");
  }
}

}  // namespace gseg
