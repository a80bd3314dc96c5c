#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ace/image.hpp"
#include "ace/numerics/tensor.hpp"

namespace ace {

// Geometry of grid-wise cropping. The source image is a grid_side × grid_side
// lattice of patch_px-pixel patches. The small crop C1 spans c1 patches per
// side, the large crop C2 spans c2 = 2·c1; both are resized to resize_px and
// encoded to token_side × token_side tokens (token_side == c1), so one C1
// token covers one grid patch and one C2 token covers a 2×2 block.
struct GridSpec {
  std::size_t grid_side = 32;
  std::size_t patch_px = 32;
  std::size_t c1 = 14;
  std::size_t c2 = 28;
  std::size_t token_side = 14;
  std::size_t resize_px = 448;

  std::size_t image_px() const { return grid_side * patch_px; }
  std::size_t tokens() const { return token_side * token_side; }

  // Throws ParameterError naming the first violated constraint.
  void validate() const;

  static GridSpec paper_defaults() { return {}; }
  static GridSpec desk_defaults() { return {16, 16, 8, 16, 8, 64}; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

// Grid coordinates: x is the column, y the row, both in patches.
struct GridPoint {
  long x = 0;
  long y = 0;
  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

std::string to_string(const GridPoint& p);

// Square binary grid (token masks).
class Mask {
 public:
  Mask() = default;
  explicit Mask(std::size_t side, std::uint8_t fill = 0) : side_(side), cells_(side * side, fill) {}

  std::size_t side() const { return side_; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return cells_[r * side_ + c]; }
  void set(std::size_t r, std::size_t c, bool on) { cells_[r * side_ + c] = on ? 1 : 0; }
  std::size_t count() const;
  const std::vector<std::uint8_t>& cells() const { return cells_; }

  template <typename Real>
  num::Tensor<Real> to_tensor() const {
    return num::Tensor<Real>({cells_.size()}, std::vector<Real>(cells_.begin(), cells_.end()));
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t side_ = 0;
  std::vector<std::uint8_t> cells_;
};

struct Overlap {
  // Row-major token indices of C2 in the overlap.
  std::vector<std::size_t> idx2;
  // C1 token indices grouped by idx2: entries 4i..4i+3 are the four C1 tokens
  // under idx2[i], in top-left, top-right, bottom-left, bottom-right order.
  std::vector<std::size_t> idx1;
  Mask o1;
  Mask o2;
};

struct CropPair {
  GridPoint anchor2;
  GridPoint anchor1;
  Overlap overlap;
};

// Overlap of C1 at anchor1 with C2 at anchor2. Throws AlignmentError when the
// offset is odd and GeometryError when C1 is not inside C2 or C2 leaves the
// grid.
Overlap compute_overlap(const GridSpec& spec, GridPoint anchor1, GridPoint anchor2);

// anchor2 uniform over [0, G - c2]², anchor1 = anchor2 + 2·(u, v) with (u, v)
// uniform over [0, (c2 - c1)/2]².
CropPair sample_crop_pair(std::mt19937_64& rng, const GridSpec& spec);

// Pixel crop of `side_patches` patches at `anchor`, resized to resize_px².
Image extract_and_resize(const Image& image, GridPoint anchor, std::size_t side_patches, const GridSpec& spec);

// 2×2 max-pool; throws DimensionError for odd sides.
Mask pool_mask(const Mask& mask);
// Nearest-neighbour 2× replication.
Mask upsample_mask(const Mask& mask);

enum class CropRole { c1, c2 };

struct GridBlock {
  GridPoint origin;        // top-left grid patch
  std::size_t extent = 1;  // 1 for C1 tokens, 2 for C2 tokens
  friend bool operator==(const GridBlock&, const GridBlock&) = default;
};

// Grid patch(es) summarized by token (row, col) of a crop at `anchor`.
GridBlock token_to_grid(const GridSpec& spec, CropRole role, GridPoint anchor, std::size_t row, std::size_t col);

// Result of the pixel-rectangle intersection check used by `geom-verify`.
struct GeometryCheck {
  std::size_t samples = 0;
  std::size_t mismatches = 0;
  std::vector<std::string> failures;  // one line per mismatch, anchors included
  bool passed() const { return mismatches == 0; }
};

// Rebuilds every overlap from pixel rectangles and compares it against
// compute_overlap for `samples` seeded crop pairs. corrupt_parity shifts C1
// by one patch to exercise the failure path.
GeometryCheck verify_geometry(const GridSpec& spec, std::size_t samples, std::uint64_t seed,
                              bool corrupt_parity = false);

}  // namespace ace
