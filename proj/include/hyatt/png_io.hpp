#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyatt {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major grayscale image with values in [0, 1].
struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Reads 8- or 16-bit grayscale (palette, RGB and alpha are converted to gray).
inline GrayImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageError("cannot open image " + path);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng init failed for " + path);
  }
  GrayImage img;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("invalid PNG " + path + ": " + err);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (depth == 16) png_set_swap(png);  // host little-endian
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  const bool wide = png_get_bit_depth(png, info) == 16;
  buffer.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img.pixels.resize(img.height * img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (wide) {
        std::uint16_t v;
        std::memcpy(&v, rows[y] + 2 * x, 2);
        img.at(y, x) = float(v) / 65535.0f;
      } else {
        img.at(y, x) = float(rows[y][x]) / 255.0f;
      }
    }
  }
  return img;
}

/// Writes an 8-bit grayscale PNG; values are clamped to [0, 1] and rounded.
inline void write_png(const std::string& path, const GrayImage& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageError("cannot write image " + path);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng init failed for " + path);
  }
  std::vector<unsigned char> bytes(img.height * img.width);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img.pixels[i]));
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = bytes.data() + y * img.width;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("PNG write failed for " + path + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace hyatt
