#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pianet/errors.hpp"

namespace pianet {

/// Dense 5-axis tensor (batch, channel, depth, height, width), row-major,
/// 64-bit floats. The universal carrier for activations, weights, gradients.
class Tensor5 {
 public:
  using Shape = std::array<std::size_t, 5>;

  Tensor5() : shape_{0, 0, 0, 0, 0} {}
  explicit Tensor5(const Shape& shape, double fill = 0.0)
      : shape_(shape), data_(count(shape), fill) {}
  Tensor5(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w,
          double fill = 0.0)
      : Tensor5(Shape{b, c, d, h, w}, fill) {}

  static std::size_t count(const Shape& s) {
    return s[0] * s[1] * s[2] * s[3] * s[4];
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t batch() const { return shape_[0]; }
  std::size_t channels() const { return shape_[1]; }
  std::size_t depth() const { return shape_[2]; }
  std::size_t height() const { return shape_[3]; }
  std::size_t width() const { return shape_[4]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  std::size_t index(std::size_t b, std::size_t c, std::size_t z, std::size_t y,
                    std::size_t x) const {
    return (((b * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x;
  }
  double& at(std::size_t b, std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[index(b, c, z, y, x)];
  }
  double at(std::size_t b, std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[index(b, c, z, y, x)];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v) { data_.assign(data_.size(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor5& o) const { return shape_ == o.shape_; }

  static std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < 5; ++i)
      out += std::to_string(s[i]) + (i + 1 < 5 ? "," : ")");
    return out;
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor5& a, const Tensor5& b, const char* where) {
  if (!a.same_shape(b))
    throw ConfigError(std::string(where) + ": shape mismatch " + a.shape_str() +
                      " vs " + b.shape_str());
}

}  // namespace pianet
