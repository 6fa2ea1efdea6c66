#pragma once

#include <cmath>
#include <span>
#include <variant>
#include <vector>

#include "scalelab/common.hpp"
#include "scalelab/rng.hpp"

namespace scalelab {

// Dense row-major tensor holding float32 or float64 data.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Dtype dt) : shape_(std::move(shape)), dtype_(dt) {
    int64_t n = shape_numel(shape_);
    if (n < 0) throw ShapeError("negative tensor extent in " + shape_str(shape_));
    if (dt == Dtype::f32)
      data_ = std::vector<float>(static_cast<size_t>(n), 0.0f);
    else
      data_ = std::vector<double>(static_cast<size_t>(n), 0.0);
  }

  static Tensor zeros(Shape shape, Dtype dt) { return Tensor(std::move(shape), dt); }

  static Tensor full(Shape shape, double v, Dtype dt) {
    Tensor t(std::move(shape), dt);
    if (dt == Dtype::f32)
      std::get<std::vector<float>>(t.data_).assign(t.numel(), static_cast<float>(v));
    else
      std::get<std::vector<double>>(t.data_).assign(t.numel(), v);
    return t;
  }

  static Tensor from_vec(Shape shape, std::vector<float> v) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = Dtype::f32;
    if (shape_numel(t.shape_) != static_cast<int64_t>(v.size()))
      throw ShapeError("data length does not match shape " + shape_str(t.shape_));
    t.data_ = std::move(v);
    return t;
  }

  static Tensor from_vec(Shape shape, std::vector<double> v) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = Dtype::f64;
    if (shape_numel(t.shape_) != static_cast<int64_t>(v.size()))
      throw ShapeError("data length does not match shape " + shape_str(t.shape_));
    t.data_ = std::move(v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Dtype dtype() const { return dtype_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape_); }
  bool defined() const { return !shape_.empty() || numel() == 1; }

  template <class T>
  std::span<T> data() {
    auto* p = std::get_if<std::vector<T>>(&data_);
    if (!p) throw NumericError(std::string("tensor dtype is ") + dtype_name(dtype_));
    return std::span<T>(p->data(), p->size());
  }

  template <class T>
  std::span<const T> data() const {
    auto* p = std::get_if<std::vector<T>>(&data_);
    if (!p) throw NumericError(std::string("tensor dtype is ") + dtype_name(dtype_));
    return std::span<const T>(p->data(), p->size());
  }

  // Dtype-agnostic element access; convenience for tests and verification.
  double at(int64_t i) const {
    return dtype_ == Dtype::f32 ? static_cast<double>(data<float>()[static_cast<size_t>(i)])
                                : data<double>()[static_cast<size_t>(i)];
  }

  void set(int64_t i, double v) {
    if (dtype_ == Dtype::f32)
      data<float>()[static_cast<size_t>(i)] = static_cast<float>(v);
    else
      data<double>()[static_cast<size_t>(i)] = v;
  }

  Tensor astype(Dtype dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) out.set(i, at(i));
    return out;
  }

  bool all_finite(int64_t* first_bad = nullptr) const {
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) {
      if (!std::isfinite(at(i))) {
        if (first_bad) *first_bad = i;
        return false;
      }
    }
    return true;
  }

  double sumsq() const {
    double s = 0;
    int64_t n = numel();
    if (dtype_ == Dtype::f32) {
      auto d = data<float>();
      for (int64_t i = 0; i < n; ++i) s += static_cast<double>(d[i]) * d[i];
    } else {
      auto d = data<double>();
      for (int64_t i = 0; i < n; ++i) s += d[i] * d[i];
    }
    return s;
  }

  double rms() const {
    int64_t n = numel();
    return n == 0 ? 0.0 : std::sqrt(sumsq() / static_cast<double>(n));
  }

  void fill_normal(Rng& rng, double sigma) {
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) set(i, sigma * rng.normal());
  }

  void fill_truncated_normal(Rng& rng, double sigma, double cut = 2.0) {
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) set(i, sigma * rng.truncated_normal(cut));
  }

 private:
  Shape shape_;
  Dtype dtype_ = Dtype::f32;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

}  // namespace scalelab
