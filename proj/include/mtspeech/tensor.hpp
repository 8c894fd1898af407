#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mtspeech/error.hpp"
#include "mtspeech/rng.hpp"

namespace mtspeech {

// Dense row-major tensor. A rank-0 tensor (empty shape) is a scalar and
// stores exactly one value.
template <typename Real>
class Tensor {
 public:
  Tensor() : shape_{}, v_(1, Real(0)) {}

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), v_(product(shape_), Real(0)) {}

  Tensor(std::vector<int64_t> shape, std::vector<Real> values)
      : shape_(std::move(shape)), v_(std::move(values)) {
    if (static_cast<int64_t>(v_.size()) != product(shape_)) {
      throw ShapeError("tensor: value count " + std::to_string(v_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(Real x) {
    Tensor t;
    t.v_[0] = x;
    return t;
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, Real x) {
    Tensor t(std::move(shape));
    std::fill(t.v_.begin(), t.v_.end(), x);
    return t;
  }

  static Tensor uniform(std::vector<int64_t> shape, Real lo, Real hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.v_) x = static_cast<Real>(rng.uniform(lo, hi));
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(v_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int64_t>& shape() const { return shape_; }

  bool is_scalar() const { return shape_.empty(); }
  // 2-D accessors.
  int64_t rows() const { return shape_.at(0); }
  int64_t cols() const { return shape_.at(1); }

  Real* data() { return v_.data(); }
  const Real* data() const { return v_.data(); }
  std::vector<Real>& values() { return v_; }
  const std::vector<Real>& values() const { return v_; }

  Real& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  Real operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }
  Real& at(int64_t r, int64_t c) { return v_[static_cast<size_t>(r * cols() + c)]; }
  Real at(int64_t r, int64_t c) const { return v_[static_cast<size_t>(r * cols() + c)]; }

  Real item() const {
    if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
    return v_[0];
  }

  bool all_finite() const {
    for (Real x : v_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static int64_t product(const std::vector<int64_t>& s) {
    int64_t p = 1;
    for (int64_t d : s) p *= d;
    return p;
  }

  static std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape_); }

  // Set when the tensor is registered as a trainable graph leaf.
  bool requires_grad = false;

 private:
  std::vector<int64_t> shape_;
  std::vector<Real> v_;
};

}  // namespace mtspeech
