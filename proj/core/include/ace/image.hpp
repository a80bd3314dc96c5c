#pragma once

#include <cstddef>
#include <vector>

namespace ace {

// Grayscale image, intensities in [0, 1], row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

  static Image square(std::size_t side, double fill = 0.0) { return Image(side, side, fill); }

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool is_square() const { return width == height; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Half-open pixel rectangle [x, x + width) × [y, y + height). Coordinates may
// be negative or exceed the image when zero padding is intended.
struct PixelRect {
  long x = 0;
  long y = 0;
  long width = 0;
  long height = 0;

  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

// Copies `rect` out of `image`; throws GeometryError if the rectangle is
// degenerate or leaves the image.
Image crop(const Image& image, const PixelRect& rect);

// Like crop(), but pixels outside the image read as 0.
Image crop_zero_padded(const Image& image, const PixelRect& rect);

// Separable resampling to width × height. Upscaling is bilinear (half-pixel
// centers, edge clamped); downscaling averages each output pixel's source
// footprint, which is an exact box average for integer ratios. Equal sizes
// copy bit-for-bit.
Image resize(const Image& image, std::size_t width, std::size_t height);

Image flip_horizontal(const Image& image);

void clamp_unit(Image& image);

}  // namespace ace
