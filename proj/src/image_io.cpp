#include "ssd/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

namespace ssd::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
  SSD_CHECK(image.shape.size() == 3 &&
                (image.shape[0] == 1 || image.shape[0] == 3),
            "write_png: expects (1,H,W) or (3,H,W), got ",
            shape_str(image.shape));
  const int c = image.shape[0], h = image.shape[1], w = image.shape[2];

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  SSD_CHECK(fp != nullptr, "write_png: cannot open '", path, "'");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  SSD_CHECK(png, "write_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("write_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("write_png: libpng error writing '", path, "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(std::size_t(w) * std::size_t(c));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        row[std::size_t(x) * c + ch] = quantize_u8(image.at(ch, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  SSD_CHECK(fp != nullptr, "read_png: cannot open '", path, "'");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  SSD_CHECK(png, "read_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("read_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("read_png: libpng error reading '", path, "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int w = int(png_get_image_width(png, info));
  const int h = int(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  SSD_CHECK(depth == 8, "read_png: '", path, "' has bit depth ", depth,
            ", expected 8");
  SSD_CHECK(color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_RGB,
            "read_png: '", path, "' must be 8-bit grayscale or RGB");
  const int c = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;

  Tensor image({c, h, w});
  std::vector<unsigned char> row(std::size_t(w) * std::size_t(c));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        image.at(ch, y, x) = double(row[std::size_t(x) * c + ch]) / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_f32(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SSD_CHECK(bool(f), "write_f32: cannot open '", path, "'");
  std::vector<float> buf(t.data.begin(), t.data.end());
  f.write(reinterpret_cast<const char*>(buf.data()),
          std::streamsize(buf.size() * sizeof(float)));
  SSD_CHECK(bool(f), "write_f32: write failed for '", path, "'");
}

Tensor read_f32(const std::string& path, Shape shape) {
  std::ifstream f(path, std::ios::binary);
  SSD_CHECK(bool(f), "read_f32: cannot open '", path, "'");
  const std::int64_t n = numel(shape);
  std::vector<float> buf(static_cast<std::size_t>(n), 0.0f);
  f.read(reinterpret_cast<char*>(buf.data()),
         std::streamsize(buf.size() * sizeof(float)));
  SSD_CHECK(bool(f) && f.gcount() == std::streamsize(n * sizeof(float)),
            "read_f32: '", path, "' shorter than ", n, " float32 values");
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < n; ++i) t[i] = double(buf[std::size_t(i)]);
  return t;
}

}  // namespace ssd::io
