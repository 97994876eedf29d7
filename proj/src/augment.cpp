#include "pefnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

namespace pefnet {

namespace {

constexpr float kImageFill = -1.0f;

struct Dims {
  std::size_t h, w;
};

Dims dims_of(const SegmentationSample& s) { return {s.image.dim(1), s.image.dim(2)}; }

// Source pixel coordinates (centre convention) for a destination pixel.
using CoordMap = std::function<std::pair<double, double>(std::size_t y, std::size_t x)>;

SegmentationSample remap(const SegmentationSample& s, const CoordMap& map) {
  const auto [h, w] = dims_of(s);
  SegmentationSample out{Tensor({3, h, w}), Tensor({1, h, w}), s.id};
  constexpr double tol = 1e-9;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto [sy, sx] = map(y, x);
      const bool inside = sy >= -tol && sx >= -tol && sy <= static_cast<double>(h - 1) + tol &&
                          sx <= static_cast<double>(w - 1) + tol;
      if (!inside) {
        for (std::size_t c = 0; c < 3; ++c) out.image[(c * h + y) * w + x] = kImageFill;
        out.mask[y * w + x] = 0.0f;
        continue;
      }
      const double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float* p = s.image.raw() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out.image[(c * h + y) * w + x] = std::clamp(static_cast<float>(top * (1 - wy) + bot * wy), -1.0f, 1.0f);
      }
      const auto ny = static_cast<std::size_t>(std::lround(fy));
      const auto nx = static_cast<std::size_t>(std::lround(fx));
      out.mask[y * w + x] = s.mask[ny * w + nx];
    }
  return out;
}

// Destination coordinate u in [0, n] to source coordinate for a piecewise-linear grid.
std::vector<double> axis_map(std::size_t n, const std::vector<double>& steps) {
  const std::size_t cells = steps.size();
  std::vector<double> bounds(cells + 1, 0.0);
  for (std::size_t i = 0; i < cells; ++i) bounds[i + 1] = bounds[i] + steps[i];
  const double total = bounds.back();
  const double N = static_cast<double>(n);
  for (auto& b : bounds) b = b / total * N;
  std::vector<double> src(n);
  const double cell = N / static_cast<double>(cells);
  for (std::size_t p = 0; p < n; ++p) {
    const double u = static_cast<double>(p) + 0.5;
    const auto i = std::min(cells - 1, static_cast<std::size_t>(u / cell));
    const double t = (u - static_cast<double>(i) * cell) / cell;
    src[p] = bounds[i] + t * (bounds[i + 1] - bounds[i]) - 0.5;
  }
  return src;
}

void require_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string("augmentation probability ") + name + " must be in [0, 1]");
}

}  // namespace

AugmentationPolicy AugmentationPolicy::none() {
  AugmentationPolicy p;
  p.p_center_crop = p.p_rotate = p.p_grid_distort = p.p_cutout = p.p_hflip = p.p_vflip = 0.0;
  return p;
}

void AugmentationPolicy::validate() const {
  require_prob(p_center_crop, "center_crop");
  require_prob(p_rotate, "rotate");
  require_prob(p_grid_distort, "grid_distort");
  require_prob(p_cutout, "cutout");
  require_prob(p_hflip, "hflip");
  require_prob(p_vflip, "vflip");
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) throw Error("crop range must satisfy 0 < min <= max <= 1");
  if (grid_cells < 1 || grid_limit < 0.0 || grid_limit >= 1.0) throw Error("invalid grid distortion settings");
  if (cutout_min_holes < 1 || cutout_max_holes < cutout_min_holes) throw Error("invalid cutout hole count range");
  if (!(cutout_min_side > 0.0 && cutout_min_side <= cutout_max_side && cutout_max_side <= 1.0)) {
    throw Error("invalid cutout side range");
  }
}

std::uint64_t augment_seed(std::uint64_t seed, std::size_t sample_index, std::size_t epoch) {
  return derive_seed(seed, {0x617567ULL, sample_index, epoch});
}

SegmentationSample hflip(const SegmentationSample& s) {
  const auto [h, w] = dims_of(s);
  SegmentationSample out = s;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image[(c * h + y) * w + x] = s.image[(c * h + y) * w + (w - 1 - x)];
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.mask[y * w + x] = s.mask[y * w + (w - 1 - x)];
  return out;
}

SegmentationSample vflip(const SegmentationSample& s) {
  const auto [h, w] = dims_of(s);
  SegmentationSample out = s;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(s.image.raw() + (c * h + (h - 1 - y)) * w, w, out.image.raw() + (c * h + y) * w);
  for (std::size_t y = 0; y < h; ++y) std::copy_n(s.mask.raw() + (h - 1 - y) * w, w, out.mask.raw() + y * w);
  return out;
}

SegmentationSample center_crop(const SegmentationSample& s, double fraction) {
  const auto [h, w] = dims_of(s);
  // Crop box [c0, c0 + span) in continuous coordinates, mapped onto the full output.
  const double span_y = fraction * static_cast<double>(h), span_x = fraction * static_cast<double>(w);
  const double y0 = (static_cast<double>(h) - span_y) / 2, x0 = (static_cast<double>(w) - span_x) / 2;
  return remap(s, [=](std::size_t y, std::size_t x) {
    const double sy = y0 + (static_cast<double>(y) + 0.5) * span_y / static_cast<double>(h) - 0.5;
    const double sx = x0 + (static_cast<double>(x) + 0.5) * span_x / static_cast<double>(w) - 0.5;
    return std::pair{sy, sx};
  });
}

SegmentationSample rotate(const SegmentationSample& s, double angle_deg) {
  const auto [h, w] = dims_of(s);
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), sn = std::sin(t);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  // Inverse rotation: where did destination (y, x) come from.
  return remap(s, [=](std::size_t y, std::size_t x) {
    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
    return std::pair{cy + c * dy - sn * dx, cx + sn * dy + c * dx};
  });
}

SegmentationSample grid_distort(const SegmentationSample& s, const std::vector<double>& x_steps,
                                const std::vector<double>& y_steps) {
  if (x_steps.empty() || y_steps.empty()) throw Error("grid_distort: empty step list");
  for (double v : x_steps)
    if (!(v > 0)) throw Error("grid_distort: steps must be positive");
  for (double v : y_steps)
    if (!(v > 0)) throw Error("grid_distort: steps must be positive");
  const auto [h, w] = dims_of(s);
  const auto xs = axis_map(w, x_steps);
  const auto ys = axis_map(h, y_steps);
  return remap(s, [&](std::size_t y, std::size_t x) { return std::pair{ys[y], xs[x]}; });
}

SegmentationSample cutout(const SegmentationSample& s, const std::vector<CutoutHole>& holes) {
  const auto [h, w] = dims_of(s);
  SegmentationSample out = s;
  for (const auto& hole : holes) {
    if (hole.y + hole.side > h || hole.x + hole.side > w) throw Error("cutout: hole outside the image");
    for (std::size_t y = hole.y; y < hole.y + hole.side; ++y)
      for (std::size_t x = hole.x; x < hole.x + hole.side; ++x) {
        for (std::size_t c = 0; c < 3; ++c) out.image[(c * h + y) * w + x] = kImageFill;
        out.mask[y * w + x] = 0.0f;
      }
  }
  return out;
}

SegmentationSample augment(const SegmentationSample& sample, const AugmentationPolicy& policy, Rng& rng,
                           AugmentRecord* record) {
  policy.validate();
  AugmentRecord rec;
  SegmentationSample s = sample;
  const auto [h, w] = dims_of(s);

  if (rng.bernoulli(policy.p_center_crop)) {
    rec.center_crop = true;
    rec.crop_fraction = rng.uniform(policy.crop_min, policy.crop_max);
    s = center_crop(s, rec.crop_fraction);
  }
  if (rng.bernoulli(policy.p_rotate)) {
    rec.rotate = true;
    rec.angle_deg = rng.uniform(-policy.max_angle_deg, policy.max_angle_deg);
    s = rotate(s, rec.angle_deg);
  }
  if (rng.bernoulli(policy.p_grid_distort)) {
    rec.grid_distort = true;
    for (int i = 0; i < policy.grid_cells; ++i) rec.grid_x_steps.push_back(rng.uniform(1 - policy.grid_limit, 1 + policy.grid_limit));
    for (int i = 0; i < policy.grid_cells; ++i) rec.grid_y_steps.push_back(rng.uniform(1 - policy.grid_limit, 1 + policy.grid_limit));
    s = grid_distort(s, rec.grid_x_steps, rec.grid_y_steps);
  }
  if (rng.bernoulli(policy.p_hflip)) {
    rec.hflip = true;
    s = hflip(s);
  }
  if (rng.bernoulli(policy.p_vflip)) {
    rec.vflip = true;
    s = vflip(s);
  }
  if (rng.bernoulli(policy.p_cutout)) {
    const double short_side = static_cast<double>(std::min(h, w));
    const auto min_side = std::max<long>(1, std::lround(policy.cutout_min_side * short_side));
    const auto max_side = std::max<long>(min_side, std::lround(policy.cutout_max_side * short_side));
    const long holes = rng.uniform_int(policy.cutout_min_holes, policy.cutout_max_holes);
    for (long i = 0; i < holes; ++i) {
      CutoutHole hole;
      hole.side = static_cast<std::size_t>(rng.uniform_int(min_side, max_side));
      hole.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(h - hole.side)));
      hole.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(w - hole.side)));
      rec.holes.push_back(hole);
    }
    s = cutout(s, rec.holes);
  }
  if (record) *record = std::move(rec);
  return s;
}

}  // namespace pefnet
