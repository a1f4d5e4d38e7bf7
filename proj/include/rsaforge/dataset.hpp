#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/random.hpp"
#include "rsaforge/tensor.hpp"

namespace rsaforge {

struct LabeledDataset {
  Tensor images;            // [M,3,H,W], values in [0,1]
  std::vector<int> labels;  // class index per image
  int class_count = 0;
};

inline void validate_dataset(const LabeledDataset& ds) {
  require_rank(ds.images, 4, "dataset images");
  if (ds.images.dim(1) != 3) throw ShapeError("dataset images must have 3 channels");
  if (ds.labels.size() != ds.images.dim(0))
    throw ShapeError("dataset has " + std::to_string(ds.labels.size()) + " labels for " +
                     std::to_string(ds.images.dim(0)) + " images");
  for (int l : ds.labels)
    if (l < 0 || l >= ds.class_count)
      throw ValueError("dataset label " + std::to_string(l) + " outside [0," +
                       std::to_string(ds.class_count) + ")");
}

// ---------------------------------------------------------------------------
// Synthetic labeled images. Class identity drives a shape type and a color
// family; position, scale, background and pixel noise are seeded jitter.
// The classes are separable enough that a small CNN fits them in a handful
// of epochs, which is the whole point: a desk-scale stand-in for a real
// photo dataset.
// ---------------------------------------------------------------------------

inline LabeledDataset gen_synthetic(int classes, int per_class, std::size_t h, std::size_t w,
                                    std::uint64_t seed) {
  if (classes < 2) throw ValueError("gen_synthetic: need at least 2 classes");
  if (per_class < 1) throw ValueError("gen_synthetic: per_class must be >= 1");
  const std::size_t m = static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class);

  static constexpr std::array<std::array<float, 3>, 7> palette = {{
      {0.90f, 0.10f, 0.10f},  // red
      {0.10f, 0.80f, 0.15f},  // green
      {0.15f, 0.25f, 0.95f},  // blue
      {0.95f, 0.85f, 0.10f},  // yellow
      {0.85f, 0.15f, 0.85f},  // magenta
      {0.10f, 0.85f, 0.85f},  // cyan
      {0.95f, 0.55f, 0.10f},  // orange
  }};

  LabeledDataset ds;
  ds.class_count = classes;
  ds.images = Tensor({m, 3, h, w});
  ds.labels.resize(m);

  SplitMix64 rng(seed);
  const double min_dim = static_cast<double>(std::min(h, w));

  std::size_t img = 0;
  for (int c = 0; c < classes; ++c) {
    const int shape_kind = c % 4;
    const auto& base = palette[static_cast<std::size_t>(c) % palette.size()];
    for (int k = 0; k < per_class; ++k, ++img) {
      ds.labels[img] = c;
      const double cx = (0.5 + rng.uniform(-0.15, 0.15)) * static_cast<double>(w);
      const double cy = (0.5 + rng.uniform(-0.15, 0.15)) * static_cast<double>(h);
      const double radius = rng.uniform(0.18, 0.32) * min_dim;
      const float bg = rng.uniform_f(0.05f, 0.25f);
      std::array<float, 3> color;
      for (int ch = 0; ch < 3; ++ch)
        color[static_cast<std::size_t>(ch)] =
            std::clamp(base[static_cast<std::size_t>(ch)] + rng.uniform_f(-0.05f, 0.05f), 0.0f,
                       1.0f);

      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = static_cast<double>(x) - cx;
          const double dy = static_cast<double>(y) - cy;
          bool inside = false;
          switch (shape_kind) {
            case 0:  // square
              inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
              break;
            case 1:  // disc
              inside = dx * dx + dy * dy <= radius * radius;
              break;
            case 2:  // upright triangle
              inside = dy >= -radius && dy <= radius &&
                       std::abs(dx) <= (dy + radius) / 2.0;
              break;
            default: {  // ring
              const double r2 = dx * dx + dy * dy;
              const double inner = 0.55 * radius;
              inside = r2 <= radius * radius && r2 >= inner * inner;
              break;
            }
          }
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const float noise = rng.uniform_f(-0.02f, 0.02f);
            const float v = inside ? color[ch] : bg;
            ds.images.at4(img, ch, y, x) = std::clamp(v + noise, 0.0f, 1.0f);
          }
        }
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255) -> [3,H,W] floats in [0,1].
// ---------------------------------------------------------------------------

namespace detail {

inline int ppm_next_int(std::istream& is) {
  // Skip whitespace and '#' comments between header tokens.
  int c = is.peek();
  while (c != EOF) {
    if (std::isspace(c)) {
      is.get();
    } else if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      break;
    }
    c = is.peek();
  }
  int value;
  if (!(is >> value)) throw FormatError("ppm: malformed header integer");
  return value;
}

} // namespace detail

inline Tensor load_ppm(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '6')
    throw FormatError("ppm: bad magic, expected binary \"P6\"");
  const int w = detail::ppm_next_int(is);
  const int h = detail::ppm_next_int(is);
  const int maxval = detail::ppm_next_int(is);
  if (w < 1 || h < 1) throw FormatError("ppm: non-positive dimensions");
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported, got " +
                                       std::to_string(maxval));
  is.get();  // single whitespace byte before the raster
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  std::vector<unsigned char> raster(n);
  is.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw TruncatedStreamError("ppm: truncated raster, expected " + std::to_string(n) +
                               " bytes, got " + std::to_string(is.gcount()));
  Tensor img({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t y = 0; y < static_cast<std::size_t>(h); ++y)
    for (std::size_t x = 0; x < static_cast<std::size_t>(w); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at3(c, y, x) =
            static_cast<float>(raster[(y * static_cast<std::size_t>(w) + x) * 3 + c]) / 255.0f;
  return img;
}

inline Tensor load_ppm_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path.string());
  return load_ppm(is);
}

} // namespace rsaforge
