#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "trackletmr/errors.hpp"
#include "trackletmr/rng.hpp"

namespace tmr::ad {

// 64-byte-aligned storage keeps Eigen's vectorized kernels on the same code
// path for every allocation, so reduction order never depends on the heap
// address a buffer happens to land on. That makes float arithmetic, and with
// it training, bit-reproducible across runs.
template <typename S>
struct AlignedAllocator {
  using value_type = S;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  S* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<S*>(::operator new(n * sizeof(S), std::align_val_t{alignment}));
  }
  void deallocate(S* p, std::size_t n) {
    ::operator delete(p, n * sizeof(S), std::align_val_t{alignment});
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename S>
using AlignedVec = std::vector<S, AlignedAllocator<S>>;

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major tensor. Scalar type is the dtype switch: float for
// training, double for gradient checking.
template <typename S>
struct Tensor {
  using Storage = AlignedVec<S>;

  Shape shape;
  Storage data;

  Tensor() = default;
  Tensor(Shape s, Storage d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data size does not match shape " + shape_str(shape));
  }
  Tensor(Shape s, const std::vector<S>& d) : Tensor(std::move(s), Storage(d.begin(), d.end())) {}
  Tensor(Shape s, std::initializer_list<S> d) : Tensor(std::move(s), Storage(d)) {}

  static Tensor zeros(Shape s) {
    const auto n = shape_numel(s);
    return Tensor(std::move(s), Storage(static_cast<std::size_t>(n), S(0)));
  }

  static Tensor full(Shape s, S value) {
    const auto n = shape_numel(s);
    return Tensor(std::move(s), Storage(static_cast<std::size_t>(n), value));
  }

  static Tensor scalar(S value) { return Tensor({}, {value}); }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t dim(int axis) const {
    if (axis < 0) axis += rank();
    return shape[static_cast<std::size_t>(axis)];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  S& at(std::initializer_list<std::int64_t> idx) {
    return data[static_cast<std::size_t>(flat_index(idx))];
  }
  S at(std::initializer_list<std::int64_t> idx) const {
    return data[static_cast<std::size_t>(flat_index(idx))];
  }

  std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      flat = flat * shape[axis] + i;
      ++axis;
    }
    return flat;
  }

  bool all_finite() const {
    for (const S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;

// Views a contiguous block of a tensor's storage as a rows x cols matrix.
template <typename S>
ConstMatMap<S> as_matrix(const Tensor<S>& t, std::int64_t rows, std::int64_t cols,
                         std::int64_t offset = 0) {
  return ConstMatMap<S>(t.data.data() + offset, rows, cols);
}

template <typename S>
MatMap<S> as_matrix(Tensor<S>& t, std::int64_t rows, std::int64_t cols,
                    std::int64_t offset = 0) {
  return MatMap<S>(t.data.data() + offset, rows, cols);
}

}  // namespace tmr::ad
