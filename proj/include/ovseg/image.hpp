#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ovseg {

// Interleaved RGB, row-major, channel values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0.0f) {}
  float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

// Single-channel 8-bit map (label maps, masks).
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  GrayImage() = default;
  GrayImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}
  std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
};

Image read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image& image);
void write_png_gray(const std::filesystem::path& path, const GrayImage& image);

}  // namespace ovseg
