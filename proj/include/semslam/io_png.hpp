#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "semslam/image.hpp"

namespace semslam {

namespace detail {

struct PngCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, PngCloser>;

struct PngReadCtx {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadCtx() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};
struct PngWriteCtx {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteCtx() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

}  // namespace detail

/// 8-bit RGB. Values quantized as round(v * 255).
inline void write_png_rgb8(const ImageRGB& img, const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for write: " + path);
  detail::PngWriteCtx ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("png write failed: " + path);
  png_init_io(ctx.png, fp.get());
  png_set_IHDR(ctx.png, ctx.info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double* px = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        double v = px[c];
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        row[x * 3 + c] = static_cast<unsigned char>(v * 255.0 + 0.5);
      }
    }
    png_write_row(ctx.png, row.data());
  }
  png_write_end(ctx.png, nullptr);
}

/// 16-bit grayscale, used for depth (millimeters) and label ids.
inline void write_png_gray16(const std::vector<std::uint16_t>& values, int width, int height,
                             const std::string& path) {
  if (static_cast<std::size_t>(width) * height != values.size())
    throw std::invalid_argument("write_png_gray16: size mismatch");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for write: " + path);
  detail::PngWriteCtx ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("png write failed: " + path);
  png_init_io(ctx.png, fp.get());
  png_set_IHDR(ctx.png, ctx.info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  std::vector<unsigned char> row(static_cast<std::size_t>(width) * 2);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::uint16_t v = values[static_cast<std::size_t>(y) * width + x];
      row[x * 2] = static_cast<unsigned char>(v >> 8);  // PNG is big-endian
      row[x * 2 + 1] = static_cast<unsigned char>(v & 0xff);
    }
    png_write_row(ctx.png, row.data());
  }
  png_write_end(ctx.png, nullptr);
}

inline ImageRGB read_png_rgb8(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path);
  detail::PngReadCtx ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("malformed png: " + path);
  png_init_io(ctx.png, fp.get());
  png_read_info(ctx.png, ctx.info);
  const int w = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
  const int h = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
  png_set_expand(ctx.png);
  png_set_strip_16(ctx.png);
  png_set_strip_alpha(ctx.png);
  png_set_gray_to_rgb(ctx.png);
  png_read_update_info(ctx.png, ctx.info);
  if (png_get_rowbytes(ctx.png, ctx.info) != static_cast<std::size_t>(w) * 3)
    throw std::runtime_error("unexpected png layout: " + path);
  ImageRGB img(w, h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(ctx.png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y)[c] = row[x * 3 + c] / 255.0;
  }
  return img;
}

inline std::vector<std::uint16_t> read_png_gray16(const std::string& path, int* width, int* height) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path);
  detail::PngReadCtx ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("malformed png: " + path);
  png_init_io(ctx.png, fp.get());
  png_read_info(ctx.png, ctx.info);
  const int w = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
  const int h = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
  const int depth = png_get_bit_depth(ctx.png, ctx.info);
  const int color = png_get_color_type(ctx.png, ctx.info);
  if (color != PNG_COLOR_TYPE_GRAY) throw std::runtime_error("expected grayscale png: " + path);
  if (depth != 16 && depth != 8) throw std::runtime_error("expected 8/16-bit png: " + path);
  std::vector<std::uint16_t> out(static_cast<std::size_t>(w) * h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * (depth / 8));
  for (int y = 0; y < h; ++y) {
    png_read_row(ctx.png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      out[static_cast<std::size_t>(y) * w + x] =
          depth == 16 ? static_cast<std::uint16_t>((row[x * 2] << 8) | row[x * 2 + 1]) : row[x];
    }
  }
  *width = w;
  *height = h;
  return out;
}

}  // namespace semslam
