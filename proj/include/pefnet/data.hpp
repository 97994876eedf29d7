#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pefnet/tensor.hpp"

namespace pefnet {

/// Image (3, H, W) in [-1, 1] and binary mask (1, H, W).
struct SegmentationSample {
  Tensor image;
  Tensor mask;
  std::string id;
};

/// 8-bit pixel value to the network's input range: v / 127.5 - 1.
inline float normalize_pixel(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }
std::uint8_t denormalize_pixel(float v);

/// Reads `<root>/images/<id>.png` and `<root>/masks/<id>.png`, resizing to
/// size x size (bilinear image, nearest mask; mask pixels >= 128 are
/// foreground). Throws DataError on orphans or unreadable files, ShapeError if
/// size is not a positive multiple of 32.
std::vector<SegmentationSample> load_dataset(const std::filesystem::path& root, std::size_t size);

/// Writes samples in the same layout as load_dataset reads.
void write_dataset(const std::filesystem::path& root, const std::vector<SegmentationSample>& samples);

/// Image tensor from a PNG at its native resolution, shape (3, H, W).
Tensor load_image(const std::filesystem::path& path);
/// Mask (1, H, W) in {0, 1} written as a single-channel 0/255 PNG.
void write_mask_png(const std::filesystem::path& path, const Tensor& mask);

/// Resamples a (c, h, w) tensor. Nearest sampling keeps masks binary.
Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w);
Tensor resize_mask(const Tensor& mask, std::size_t out_h, std::size_t out_w);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Splits {
  std::vector<SegmentationSample> train, val, test;
};

/// Seeded shuffle, then contiguous partition: floor(n * train), floor(n * val),
/// remainder to test.
Splits split(std::vector<SegmentationSample> samples, const SplitSpec& spec);

/// Polyp-like synthetic data: smooth background plus 1-3 bright textured
/// ellipses whose support is the mask. Every mask covers 2%-40% of the image.
std::vector<SegmentationSample> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed);

struct Batch {
  Tensor images;  // (b, 3, H, W)
  Tensor masks;   // (b, 1, H, W)
};
/// Stacks equally sized samples along a new batch axis.
Batch make_batch(const std::vector<SegmentationSample>& samples);

}  // namespace pefnet
