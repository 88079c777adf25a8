#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "listen/error.hpp"

namespace listenkit {

using Dims = std::vector<std::size_t>;

inline std::size_t product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. T is float for training/inference and double for
// gradient checks.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  // Aligned so vectorized reductions take the same path for every
  // allocation; results are then bitwise reproducible run to run.
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;
  explicit Tensor(Dims dims, T fill = T{0}) : dims_(std::move(dims)), data_(product(dims_), fill) {}
  Tensor(Dims dims, const std::vector<T>& data) : dims_(std::move(dims)), data_(data.begin(), data.end()) {
    if (product(dims_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_string(dims_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return Tensor({rows, cols}, std::vector<T>(values));
  }

  const Dims& dims() const { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Two-dimensional accessors; only valid for rank-2 tensors.
  std::size_t rows() const { return dims_.at(0); }
  std::size_t cols() const { return dims_.at(1); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * dims_[1], dims_[1]}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * dims_[1], dims_[1]}; }

  void reshape(Dims dims) {
    if (product(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + dims_string(dims_) + " to " + dims_string(dims));
    }
    dims_ = std::move(dims);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }
  void zero() { fill(T{0}); }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Dims dims_;
  Storage data_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
Eigen::Map<RowMatrix<T>> as_matrix(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.dims().front()),
          static_cast<Eigen::Index>(t.size() / std::max<std::size_t>(t.dims().front(), 1))};
}

template <typename T>
Eigen::Map<const RowMatrix<T>> as_matrix(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.dims().front()),
          static_cast<Eigen::Index>(t.size() / std::max<std::size_t>(t.dims().front(), 1))};
}

template <typename T>
Eigen::Map<RowVector<T>> as_row(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

template <typename T>
Eigen::Map<const RowVector<T>> as_row(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape " + dims_string(a.dims()) + " vs " +
                     dims_string(b.dims()));
  }
}

// Deterministic random stream. Every random draw in the library goes through
// one of these; there is no ambient entropy.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Independent child stream keyed by `stream`; does not advance this one.
  Prng fork(std::uint64_t stream) const { return Prng(mix(seed_ ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  template <typename It>
  void shuffle(It first, It last) {
    // Fisher-Yates with our own index draws so the order does not depend on
    // the standard library's std::shuffle.
    auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[index(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Normal(0, std) resampled until it falls inside +/- 2 std.
template <typename T>
Tensor<T> trunc_normal_init(const Dims& dims, double std, Prng& prng) {
  if (!(std > 0.0)) throw DomainError("trunc_normal_init: std must be positive");
  Tensor<T> out(dims);
  for (auto& v : out.values()) {
    double z;
    do {
      z = prng.normal();
    } while (z < -2.0 || z > 2.0);
    v = static_cast<T>(z * std);
  }
  return out;
}

}  // namespace listenkit
