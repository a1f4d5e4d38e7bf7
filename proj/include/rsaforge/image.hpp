#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include "rsaforge/errors.hpp"
#include "rsaforge/tensor.hpp"

namespace rsaforge {

// Default normalization constants: the de-facto ImageNet statistics.
inline constexpr std::array<float, 3> kDefaultMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kDefaultStd = {0.229f, 0.224f, 0.225f};

// Bilinear resize of a [C,H,W] image with half-pixel centers:
// source coordinate s = (d + 0.5) * (in / out) - 0.5, clamped to [0, in-1].
// Each channel is interpolated independently.
inline Tensor bilinear_resize(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  require_rank(img, 3, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const std::size_t c = img.dim(0), in_h = img.dim(1), in_w = img.dim(2);
  if (in_h == out_h && in_w == out_w) return img;

  struct Axis {
    std::size_t lo, hi;
    double frac;
  };
  auto map_axis = [](std::size_t d, std::size_t out, std::size_t in) {
    double s = (static_cast<double>(d) + 0.5) * (static_cast<double>(in) / out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return Axis{lo, hi, s - static_cast<double>(lo)};
  };

  std::vector<Axis> ys(out_h), xs(out_w);
  for (std::size_t y = 0; y < out_h; ++y) ys[y] = map_axis(y, out_h, in_h);
  for (std::size_t x = 0; x < out_w; ++x) xs[x] = map_axis(x, out_w, in_w);

  Tensor out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const Axis& ay = ys[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const Axis& ax = xs[x];
        const double tl = img.at3(ch, ay.lo, ax.lo);
        const double tr = img.at3(ch, ay.lo, ax.hi);
        const double bl = img.at3(ch, ay.hi, ax.lo);
        const double br = img.at3(ch, ay.hi, ax.hi);
        const double top = tl + (tr - tl) * ax.frac;
        const double bot = bl + (br - bl) * ax.frac;
        out.at3(ch, y, x) = static_cast<float>(top + (bot - top) * ay.frac);
      }
    }
  }
  return out;
}

// Per-channel (x - mean_c) / std_c on a [3,H,W] image.
inline Tensor normalize_image(const Tensor& img, const std::array<float, 3>& mean,
                              const std::array<float, 3>& std_dev) {
  require_rank(img, 3, "normalize_image");
  if (img.dim(0) != 3) throw ShapeError("normalize_image: expected 3 channels, got " + img.shape_str());
  for (float s : std_dev)
    if (!(s > 0.0f)) throw ValueError("normalize_image: std components must be > 0");
  Tensor out = img;
  const std::size_t plane = img.dim(1) * img.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) / std_dev[c];
  }
  return out;
}

} // namespace rsaforge
