// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradweave {

/// Dense n-dimensional array of 64-bit floats, row-major. Immutable by
/// convention once handed to a Graph: ops never mutate their inputs.
/// Construction rejects non-finite entries and shape/size mismatches.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_count(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    }
    validate_finite();
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    t.validate_finite();
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  // rank-2 helpers; most of the library works on matrices
  std::size_t rows() const { require_rank2(); return shape_[0]; }
  std::size_t cols() const { require_rank2(); return shape_[1]; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const { require_rank2(); return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { require_rank2(); return data_[r * shape_[1] + c]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Rechecks the finiteness invariant after in-place edits.
  void validate_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("Tensor: non-finite entry");
      }
    }
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  static std::size_t checked_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("Tensor: zero dimension");
      n *= d;
    }
    return n;
  }

  void require_rank2() const {
    if (shape_.size() != 2) throw std::invalid_argument("Tensor: rank-2 access on " + shape_str());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline Tensor random_normal(std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

inline Tensor random_uniform(std::vector<std::size_t> shape, double lo, double hi,
                             std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// exact GeLU, sigma(z) = z * Phi(z) with Phi the standard normal CDF
inline double gelu_scalar(double z) {
  return z * 0.5 * std::erfc(-z * 0.70710678118654752440);
}

// sigma'(z) = Phi(z) + z * phi(z)
inline double gelu_derivative_scalar(double z) {
  const double phi = std::exp(-0.5 * z * z) * 0.39894228040143267794;
  return 0.5 * std::erfc(-z * 0.70710678118654752440) + z * phi;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Elementwise exact GeLU.
inline Tensor gelu(const Tensor& z) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = gelu_scalar(z[i]);
  return out;
}

/// Elementwise GeLU derivative.
inline Tensor gelu_derivative(const Tensor& z) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = gelu_derivative_scalar(z[i]);
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

}  // namespace gradweave
