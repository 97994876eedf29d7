#pragma once

#include <cstdint>
#include <vector>

#include "pefnet/data.hpp"
#include "pefnet/rng.hpp"

namespace pefnet {

/// Per-transform probabilities and parameter ranges. Geometric transforms are
/// applied identically to image and mask (bilinear for the image, nearest for
/// the mask); uncovered image pixels become -1 (pixel value 0), mask pixels 0.
struct AugmentationPolicy {
  double p_center_crop = 0.3;
  double crop_min = 0.7;
  double crop_max = 1.0;

  double p_rotate = 0.3;
  double max_angle_deg = 90.0;

  double p_grid_distort = 0.3;
  int grid_cells = 5;
  double grid_limit = 0.3;

  double p_cutout = 0.5;
  int cutout_min_holes = 1;
  int cutout_max_holes = 8;
  double cutout_min_side = 0.08;  // fraction of min(H, W)
  double cutout_max_side = 0.25;

  double p_hflip = 0.5;
  double p_vflip = 0.5;

  /// Every probability zero: augment() returns its input unchanged.
  static AugmentationPolicy none();
  void validate() const;
};

struct CutoutHole {
  std::size_t y = 0, x = 0, side = 0;
};

/// What augment() actually did, for replay and inspection.
struct AugmentRecord {
  bool center_crop = false;
  double crop_fraction = 1.0;
  bool rotate = false;
  double angle_deg = 0.0;
  bool grid_distort = false;
  std::vector<double> grid_x_steps, grid_y_steps;
  bool hflip = false;
  bool vflip = false;
  std::vector<CutoutHole> holes;
};

/// Stream seed for one sample in one epoch; independent of processing order.
std::uint64_t augment_seed(std::uint64_t seed, std::size_t sample_index, std::size_t epoch);

/// Order: center crop, rotation, grid distortion, horizontal flip, vertical
/// flip, cutout. Each fires with its probability.
SegmentationSample augment(const SegmentationSample& sample, const AugmentationPolicy& policy, Rng& rng,
                           AugmentRecord* record = nullptr);

SegmentationSample hflip(const SegmentationSample& s);
SegmentationSample vflip(const SegmentationSample& s);
/// Keeps the central fraction of each side and resizes back.
SegmentationSample center_crop(const SegmentationSample& s, double fraction);
/// Counter-clockwise rotation about the image centre.
SegmentationSample rotate(const SegmentationSample& s, double angle_deg);
/// Piecewise-linear remap: destination cell i along an axis samples a source
/// span proportional to steps[i]. Steps of all ones is the identity.
SegmentationSample grid_distort(const SegmentationSample& s, const std::vector<double>& x_steps,
                                const std::vector<double>& y_steps);
/// Sets each hole to -1 in every image channel and 0 in the mask.
SegmentationSample cutout(const SegmentationSample& s, const std::vector<CutoutHole>& holes);

}  // namespace pefnet
