#pragma once

#include <string>

#include "ssd/tensor.hpp"

namespace ssd::io {

// Images on disk are 8-bit grayscale or RGB PNG; in memory they are (C,H,W)
// float tensors in [0,1]. Round-trip through quantize_u8 is bit-exact.
inline unsigned char quantize_u8(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(c * 255.0 + 0.5);
}

void write_png(const std::string& path, const Tensor& image);
Tensor read_png(const std::string& path);

// Raw little-endian float32, row-major.
void write_f32(const std::string& path, const Tensor& t);
Tensor read_f32(const std::string& path, Shape shape);

}  // namespace ssd::io
