#include "pefnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <set>

#include "pefnet/image.hpp"
#include "pefnet/rng.hpp"

namespace fs = std::filesystem;

namespace pefnet {

namespace {

void require_network_size(std::size_t size) {
  if (size == 0 || size % 32 != 0) {
    throw ShapeError("image size " + std::to_string(size) + " must be a positive multiple of 32");
  }
}

std::vector<std::string> png_stems(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("missing directory " + dir.string());
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

}  // namespace

std::uint8_t denormalize_pixel(float v) {
  const double p = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
}

Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  const auto& s = image.shape();
  std::vector<float> src(image.data().begin(), image.data().end());
  auto out = resize_bilinear(src, s[0], s[1], s[2], out_h, out_w);
  for (auto& v : out) v = std::clamp(v, -1.0f, 1.0f);
  return Tensor({s[0], out_h, out_w}, std::move(out));
}

Tensor resize_mask(const Tensor& mask, std::size_t out_h, std::size_t out_w) {
  const auto& s = mask.shape();
  std::vector<float> src(mask.data().begin(), mask.data().end());
  return Tensor({s[0], out_h, out_w}, resize_nearest(src, s[0], s[1], s[2], out_h, out_w));
}

Tensor load_image(const fs::path& path) {
  const Image8 img = read_png(path, 3);
  Tensor t({3, img.height, img.width});
  auto d = t.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) d[(c * img.height + y) * img.width + x] = normalize_pixel(img.at(y, x, c));
  return t;
}

void write_mask_png(const fs::path& path, const Tensor& mask) {
  const auto& s = mask.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("write_mask_png: mask must be (1, H, W), got " + shape_str(s));
  Image8 img{s[2], s[1], 1, std::vector<std::uint8_t>(s[1] * s[2])};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask[i] > 0.5f ? 255 : 0;
  write_png(path, img);
}

std::vector<SegmentationSample> load_dataset(const fs::path& root, std::size_t size) {
  require_network_size(size);
  const auto images = png_stems(root / "images");
  const auto masks = png_stems(root / "masks");
  const std::set<std::string> image_set(images.begin(), images.end());
  const std::set<std::string> mask_set(masks.begin(), masks.end());
  std::string orphans;
  for (const auto& id : images)
    if (!mask_set.count(id)) orphans += " images/" + id + ".png";
  for (const auto& id : masks)
    if (!image_set.count(id)) orphans += " masks/" + id + ".png";
  if (!orphans.empty()) throw DataError("files without a counterpart in " + root.string() + ":" + orphans);
  if (images.empty()) throw DataError("no PNG pairs found under " + root.string());

  std::vector<SegmentationSample> out;
  out.reserve(images.size());
  for (const auto& id : images) {
    Tensor image = resize_image(load_image(root / "images" / (id + ".png")), size, size);
    const Image8 m = read_png(root / "masks" / (id + ".png"), 1);
    std::vector<float> raw(m.pixels.begin(), m.pixels.end());
    auto resized = resize_nearest(raw, 1, m.height, m.width, size, size);
    for (auto& v : resized) v = v >= 128.0f ? 1.0f : 0.0f;
    out.push_back({std::move(image), Tensor({1, size, size}, std::move(resized)), id});
  }
  return out;
}

void write_dataset(const fs::path& root, const std::vector<SegmentationSample>& samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : samples) {
    const auto& shape = s.image.shape();
    Image8 img{shape[2], shape[1], 3, std::vector<std::uint8_t>(shape[1] * shape[2] * 3)};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < shape[1]; ++y)
        for (std::size_t x = 0; x < shape[2]; ++x) img.at(y, x, c) = denormalize_pixel(s.image[(c * shape[1] + y) * shape[2] + x]);
    write_png(root / "images" / (s.id + ".png"), img);
    write_mask_png(root / "masks" / (s.id + ".png"), s.mask);
  }
}

void SplitSpec::validate() const {
  if (train < 0 || val < 0 || test < 0) throw Error("split fractions must be non-negative");
  if (std::abs(train + val + test - 1.0) > 1e-9) throw Error("split fractions must sum to 1");
}

Splits split(std::vector<SegmentationSample> samples, const SplitSpec& spec) {
  spec.validate();
  if (samples.size() < 3) throw DataError("split needs at least 3 samples, got " + std::to_string(samples.size()));
  Rng rng(derive_seed(spec.seed, {0x73706c6974ULL}));
  rng.shuffle(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * spec.train + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(n * spec.val + 1e-9));
  Splits out;
  auto it = std::make_move_iterator(samples.begin());
  out.train.assign(it, it + static_cast<long>(n_train));
  out.val.assign(it + static_cast<long>(n_train), it + static_cast<long>(n_train + n_val));
  out.test.assign(it + static_cast<long>(n_train + n_val), std::make_move_iterator(samples.end()));
  return out;
}

std::vector<SegmentationSample> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  require_network_size(size);
  struct Blob {
    double cx, cy, a, b, cos_t, sin_t;
    bool contains(double x, double y) const {
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * cos_t + dy * sin_t) / a;
      const double v = (-dx * sin_t + dy * cos_t) / b;
      return u * u + v * v <= 1.0;
    }
  };
  const double S = static_cast<double>(size);
  const std::size_t pixels = size * size;

  std::vector<SegmentationSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {i}));

    // Blob layout, redrawn until coverage lands in [2%, 40%].
    std::vector<Blob> blobs;
    std::vector<float> mask(pixels);
    for (;;) {
      blobs.clear();
      const long count = rng.uniform_int(1, 3);
      for (long k = 0; k < count; ++k) {
        const double t = rng.uniform(0.0, std::numbers::pi);
        blobs.push_back({rng.uniform(0.15, 0.85) * S, rng.uniform(0.15, 0.85) * S, rng.uniform(0.08, 0.22) * S,
                         rng.uniform(0.08, 0.22) * S, std::cos(t), std::sin(t)});
      }
      std::size_t covered = 0;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          bool inside = false;
          for (const auto& bl : blobs) inside = inside || bl.contains(x + 0.5, y + 0.5);
          mask[y * size + x] = inside ? 1.0f : 0.0f;
          covered += inside;
        }
      const double frac = static_cast<double>(covered) / static_cast<double>(pixels);
      if (frac >= 0.02 && frac <= 0.40) break;
    }

    // Background: pinkish base colour with three low-frequency waves.
    const double base[3] = {rng.uniform(150, 200), rng.uniform(60, 100), rng.uniform(50, 90)};
    double wave[3][4];
    for (auto& wv : wave) {
      wv[0] = rng.uniform(8, 20);                          // amplitude
      wv[1] = rng.uniform(0.5, 2.0) * 2 * std::numbers::pi / S;  // x frequency
      wv[2] = rng.uniform(0.5, 2.0) * 2 * std::numbers::pi / S;  // y frequency
      wv[3] = rng.uniform(0, 2 * std::numbers::pi);        // phase
    }
    const double lift = rng.uniform(45, 75);
    const double tex_freq = rng.uniform(0.3, 0.7);
    const double tex_phase = rng.uniform(0, 2 * std::numbers::pi);

    Tensor image({3, size, size});
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double shade = 0;
        for (const auto& wv : wave) shade += wv[0] * std::cos(wv[1] * x + wv[2] * y + wv[3]);
        const bool inside = mask[y * size + x] > 0.5f;
        const double texture = inside ? lift + 10.0 * std::sin(tex_freq * x + tex_phase) * std::cos(tex_freq * y) : 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          // Blobs brighten mostly the red and green channels.
          const double gain = c == 2 ? 0.4 : 1.0;
          const double v = std::clamp(std::round(base[c] + shade + gain * texture), 0.0, 255.0);
          image[(c * size + y) * size + x] = normalize_pixel(static_cast<std::uint8_t>(v));
        }
      }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    out.push_back({std::move(image), Tensor({1, size, size}, std::move(mask)), id});
  }
  return out;
}

Batch make_batch(const std::vector<SegmentationSample>& samples) {
  if (samples.empty()) throw DataError("make_batch: no samples");
  const auto& is = samples[0].image.shape();
  const std::size_t b = samples.size(), h = is[1], w = is[2];
  Batch out{Tensor({b, 3, h, w}), Tensor({b, 1, h, w})};
  for (std::size_t i = 0; i < b; ++i) {
    if (samples[i].image.shape() != is || samples[i].mask.shape() != Shape{1, h, w}) {
      throw ShapeError("make_batch: sample " + samples[i].id + " has a different size");
    }
    std::copy_n(samples[i].image.raw(), 3 * h * w, out.images.raw() + i * 3 * h * w);
    std::copy_n(samples[i].mask.raw(), h * w, out.masks.raw() + i * h * w);
  }
  return out;
}

}  // namespace pefnet
