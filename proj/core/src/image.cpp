#include "ace/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ace/error.hpp"

namespace ace {

namespace {

std::string describe(const PixelRect& r) {
  return "rect(x=" + std::to_string(r.x) + ", y=" + std::to_string(r.y) + ", w=" + std::to_string(r.width) +
         ", h=" + std::to_string(r.height) + ")";
}

// Sparse 1-D resampling matrix: for each output index, (source index, weight).
using Taps = std::vector<std::vector<std::pair<std::size_t, double>>>;

Taps axis_taps(std::size_t src, std::size_t dst) {
  Taps taps(dst);
  if (dst >= src) {
    const double scale = double(src) / double(dst);
    for (std::size_t o = 0; o < dst; ++o) {
      double pos = (double(o) + 0.5) * scale - 0.5;
      pos = std::clamp(pos, 0.0, double(src - 1));
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, src - 1);
      const double frac = pos - double(lo);
      if (frac == 0.0 || lo == hi) {
        taps[o].emplace_back(lo, 1.0);
      } else {
        taps[o].emplace_back(lo, 1.0 - frac);
        taps[o].emplace_back(hi, frac);
      }
    }
    return taps;
  }
  // Area average: output o covers source interval [o*s, (o+1)*s).
  const double s = double(src) / double(dst);
  for (std::size_t o = 0; o < dst; ++o) {
    const double a = double(o) * s;
    const double b = double(o + 1) * s;
    const auto first = static_cast<std::size_t>(std::floor(a));
    const auto last = std::min(src, static_cast<std::size_t>(std::ceil(b)));
    for (std::size_t i = first; i < last; ++i) {
      const double w = std::min(b, double(i + 1)) - std::max(a, double(i));
      if (w > 0) taps[o].emplace_back(i, w / s);
    }
  }
  return taps;
}

}  // namespace

Image crop(const Image& image, const PixelRect& rect) {
  if (rect.width <= 0 || rect.height <= 0) throw GeometryError("crop: degenerate " + describe(rect));
  if (rect.x < 0 || rect.y < 0 || rect.x + rect.width > long(image.width) || rect.y + rect.height > long(image.height)) {
    throw GeometryError("crop: " + describe(rect) + " leaves the " + std::to_string(image.width) + "x" +
                        std::to_string(image.height) + " image");
  }
  return crop_zero_padded(image, rect);
}

Image crop_zero_padded(const Image& image, const PixelRect& rect) {
  if (rect.width <= 0 || rect.height <= 0) throw GeometryError("crop: degenerate " + describe(rect));
  Image out(std::size_t(rect.width), std::size_t(rect.height), 0.0);
  for (long y = 0; y < rect.height; ++y) {
    const long sy = rect.y + y;
    if (sy < 0 || sy >= long(image.height)) continue;
    for (long x = 0; x < rect.width; ++x) {
      const long sx = rect.x + x;
      if (sx < 0 || sx >= long(image.width)) continue;
      out.at(std::size_t(x), std::size_t(y)) = image.at(std::size_t(sx), std::size_t(sy));
    }
  }
  return out;
}

Image resize(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw GeometryError("resize: target extent must be positive");
  if (width == image.width && height == image.height) return image;
  const Taps tx = axis_taps(image.width, width);
  const Taps ty = axis_taps(image.height, height);

  Image rows(width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double v = 0;
      for (const auto& [i, w] : tx[x]) v += w * image.at(i, y);
      rows.at(x, y) = v;
    }
  }
  Image out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double v = 0;
      for (const auto& [i, w] : ty[y]) v += w * rows.at(x, i);
      out.at(x, y) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) out.at(x, y) = image.at(image.width - 1 - x, y);
  }
  return out;
}

void clamp_unit(Image& image) {
  for (double& v : image.pixels) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace ace
