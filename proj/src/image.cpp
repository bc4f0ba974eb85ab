#include "ovseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "ovseg/error.hpp"

namespace ovseg {
namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

// Decodes any PNG to 8-bit with the requested channel count (1 or 3).
std::vector<std::uint8_t> decode(const std::filesystem::path& path, int channels, int& h, int& w) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt png: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  if (static_cast<int>(png_get_channels(png, info)) != channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unsupported png layout: " + path.string());
  }
  const size_t stride = static_cast<size_t>(w) * channels;
  pixels.resize(stride * static_cast<size_t>(h));
  rows.resize(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + stride * static_cast<size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

void encode(const std::filesystem::path& path, const std::uint8_t* data, int h, int w, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png init failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png encode failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(w) * channels;
  for (int y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + stride * static_cast<size_t>(y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
  int h = 0;
  int w = 0;
  auto px = decode(path, 3, h, w);
  Image img(h, w);
  for (size_t i = 0; i < px.size(); ++i) img.rgb[i] = static_cast<float>(px[i]) / 255.0f;
  return img;
}

GrayImage read_png_gray(const std::filesystem::path& path) {
  GrayImage img;
  img.data = decode(path, 1, img.height, img.width);
  return img;
}

void write_png_rgb(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> px(image.rgb.size());
  for (size_t i = 0; i < px.size(); ++i) {
    const float v = std::clamp(image.rgb[i], 0.0f, 1.0f);
    px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  encode(path, px.data(), image.height, image.width, 3);
}

void write_png_gray(const std::filesystem::path& path, const GrayImage& image) {
  encode(path, image.data.data(), image.height, image.width, 1);
}

}  // namespace ovseg
