#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssd/common.hpp"
#include "ssd/rng.hpp"

namespace ssd {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float64 array. Images are (C,H,W), depth maps (H,W),
// sample grids (H,W,2), scalars {1}.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor from(Shape s, std::vector<double> d);
  static Tensor uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0);

  std::int64_t size() const { return std::int64_t(data.size()); }
  bool is_scalar() const { return size() == 1; }

  double& operator[](std::int64_t i) { return data[std::size_t(i)]; }
  double operator[](std::int64_t i) const { return data[std::size_t(i)]; }

  // (H,W) accessor
  double& at(int y, int x) { return data[std::size_t(y) * shape[1] + x]; }
  double at(int y, int x) const { return data[std::size_t(y) * shape[1] + x]; }

  // (C,H,W) accessor
  double& at(int c, int y, int x) {
    return data[(std::size_t(c) * shape[1] + y) * shape[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(std::size_t(c) * shape[1] + y) * shape[2] + x];
  }

  bool all_finite() const;
  double min_value() const;
  double max_value() const;
  double mean_value() const;

  Tensor& set_requires_grad(bool v) {
    requires_grad = v;
    return *this;
  }
};

bool same_shape(const Tensor& a, const Tensor& b);

}  // namespace ssd
