#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pefnet {

/// Interleaved 8-bit raster (row-major, channels innermost).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Reads a PNG, converting to `channels` (1 = gray, 3 = RGB). Throws DataError.
Image8 read_png(const std::filesystem::path& path, std::size_t channels);
void write_png(const std::filesystem::path& path, const Image8& image);

/// Half-pixel-centre bilinear resampling on float planes (c, h, w).
std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t c, std::size_t h, std::size_t w,
                                   std::size_t out_h, std::size_t out_w);
std::vector<float> resize_nearest(const std::vector<float>& src, std::size_t c, std::size_t h, std::size_t w,
                                  std::size_t out_h, std::size_t out_w);

}  // namespace pefnet
