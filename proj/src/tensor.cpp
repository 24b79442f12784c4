#include "ssd/tensor.hpp"

#include <cmath>

namespace ssd {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (int d : shape) SSD_CHECK(d > 0, "tensor dims must be positive, got ", shape_str(shape));
  data.assign(std::size_t(numel(shape)), fill);
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> d) {
  Tensor t;
  t.shape = std::move(s);
  SSD_CHECK(std::int64_t(d.size()) == numel(t.shape), "data length ", d.size(),
            " does not match shape ", shape_str(t.shape));
  t.data = std::move(d);
  return t;
}

Tensor Tensor::uniform(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::min_value() const {
  double m = data[0];
  for (double v : data) m = std::min(m, v);
  return m;
}

double Tensor::max_value() const {
  double m = data[0];
  for (double v : data) m = std::max(m, v);
  return m;
}

double Tensor::mean_value() const {
  double s = 0.0;
  for (double v : data) s += v;
  return s / double(data.size());
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace ssd
