#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fv2ic/errors.hpp"
#include "fv2ic/rng.hpp"

namespace fv2ic {

// 64-byte-aligned allocator for tensor storage. Alignment is not just a
// speed knob here: SIMD kernels peel loops based on the address mod the
// vector width, so unaligned buffers would make summation order (and the
// low-order bits of results) depend on where the allocator happened to
// place them. Fixed alignment keeps every run bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  // Default-construction is a no-op for arithmetic types, so resize() on
  // scratch buffers does not touch memory. Value initialization (assign,
  // fill) is unaffected.
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
  bool operator==(const AlignedAllocator&) const { return true; }
};

using AlignedVec = std::vector<double, AlignedAllocator<double>>;

// Dense row-major double tensor, rank <= 4. Value semantics throughout:
// copies are real copies, which keeps client/server parameter exchange an
// explicit message boundary.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  // Skips the zero fill; every element must be written before being read.
  static Tensor uninit(std::vector<int> shape) {
    Tensor t;
    t.data_.resize(static_cast<std::size_t>(count(shape)));
    t.shape_ = std::move(shape);
    return t;
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, const std::vector<double>& values) {
    Tensor t;
    if (static_cast<std::size_t>(count(shape)) != values.size()) {
      throw ContractViolation("tensor data does not match shape");
    }
    t.shape_ = std::move(shape);
    t.data_.assign(values.begin(), values.end());
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = stddev * rng.normal();
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  AlignedVec& values() { return data_; }
  const AlignedVec& values() const { return data_; }

  double& operator[](int i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != size()) throw ContractViolation("reshape changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // min/max over all elements; tensor must be nonempty.
  double min() const { return *std::min_element(data_.begin(), data_.end()); }
  double max() const { return *std::max_element(data_.begin(), data_.end()); }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

  static int count(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
      if (d < 0) throw ContractViolation("negative dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  AlignedVec data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ContractViolation("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fv2ic
