#include "sv/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace sv::img {

namespace {

struct FileCloser {
  FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace

Tensor load_png(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  FileCloser closer{f};

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read error: " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  const int W = (int)png_get_image_width(png, info);
  const int H = (int)png_get_image_height(png, info);
  const int C = (int)png_get_channels(png, info);
  if (C != 1 && C != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unsupported channel count in " + path);
  }

  std::vector<png_byte> rowbuf((size_t)W * C);
  Tensor out({H, W, C});
  for (int y = 0; y < H; ++y) {
    png_read_row(png, rowbuf.data(), nullptr);
    float* dst = out.data() + (int64_t)y * W * C;
    for (int i = 0; i < W * C; ++i) dst[i] = rowbuf[i] / 255.f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void save_png(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || (image.dim(2) != 1 && image.dim(2) != 3))
    throw std::invalid_argument("save_png expects (H,W,1|3), got " + image.shape_str());
  const int H = image.dim(0), W = image.dim(1), C = image.dim(2);

  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path);
  FileCloser closer{f};

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write error: " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, W, H, 8, C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> rowbuf((size_t)W * C);
  for (int y = 0; y < H; ++y) {
    const float* src = image.data() + (int64_t)y * W * C;
    for (int i = 0; i < W * C; ++i) {
      const float v = std::clamp(src[i], 0.f, 1.f);
      rowbuf[i] = (png_byte)std::lround(v * 255.f);
    }
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace sv::img
