#include "ace/cropgrid.hpp"

#include <algorithm>
#include <numeric>

#include "ace/error.hpp"

namespace ace {

void GridSpec::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("GridSpec: " + what); };
  if (grid_side == 0 || patch_px == 0 || c1 == 0 || resize_px == 0) fail("extents must be positive");
  if (c1 % 2 != 0) fail("c1 must be even (got " + std::to_string(c1) + ")");
  if (c2 != 2 * c1) fail("c2 must equal 2*c1 (got c1=" + std::to_string(c1) + ", c2=" + std::to_string(c2) + ")");
  if (token_side != c1) fail("token_side must equal c1 (got " + std::to_string(token_side) + ")");
  if (grid_side < c2) fail("grid_side must be at least c2 (got " + std::to_string(grid_side) + ")");
  if (resize_px % token_side != 0) {
    fail("resize_px must be divisible by token_side (got " + std::to_string(resize_px) + ")");
  }
}

std::string to_string(const GridPoint& p) { return "(" + std::to_string(p.x) + ", " + std::to_string(p.y) + ")"; }

std::size_t Mask::count() const { return std::size_t(std::count(cells_.begin(), cells_.end(), std::uint8_t{1})); }

Overlap compute_overlap(const GridSpec& spec, GridPoint anchor1, GridPoint anchor2) {
  const long dx = anchor1.x - anchor2.x;
  const long dy = anchor1.y - anchor2.y;
  const long c1 = long(spec.c1);
  const long c2 = long(spec.c2);
  const long g = long(spec.grid_side);
  if (anchor2.x < 0 || anchor2.y < 0 || anchor2.x + c2 > g || anchor2.y + c2 > g) {
    throw GeometryError("C2 at " + to_string(anchor2) + " leaves the " + std::to_string(g) + "-patch grid");
  }
  if (dx < 0 || dy < 0 || dx + c1 > c2 || dy + c1 > c2) {
    throw GeometryError("C1 at " + to_string(anchor1) + " is not inside C2 at " + to_string(anchor2));
  }
  if (dx % 2 != 0 || dy % 2 != 0) {
    throw AlignmentError("odd offset between C1 at " + to_string(anchor1) + " and C2 at " + to_string(anchor2));
  }

  const std::size_t t = spec.token_side;
  const std::size_t half = t / 2;
  const std::size_t ox = std::size_t(dx / 2);
  const std::size_t oy = std::size_t(dy / 2);

  Overlap out;
  out.o1 = Mask(t, 1);
  out.o2 = Mask(t, 0);
  out.idx2.reserve(half * half);
  out.idx1.reserve(4 * half * half);
  for (std::size_t r = 0; r < half; ++r) {
    for (std::size_t c = 0; c < half; ++c) {
      out.o2.set(oy + r, ox + c, true);
      out.idx2.push_back((oy + r) * t + (ox + c));
      const std::size_t top = 2 * r;
      const std::size_t left = 2 * c;
      out.idx1.push_back(top * t + left);
      out.idx1.push_back(top * t + left + 1);
      out.idx1.push_back((top + 1) * t + left);
      out.idx1.push_back((top + 1) * t + left + 1);
    }
  }
  return out;
}

CropPair sample_crop_pair(std::mt19937_64& rng, const GridSpec& spec) {
  spec.validate();
  std::uniform_int_distribution<long> pos(0, long(spec.grid_side - spec.c2));
  std::uniform_int_distribution<long> step(0, long(spec.c2 - spec.c1) / 2);
  CropPair pair;
  pair.anchor2.x = pos(rng);
  pair.anchor2.y = pos(rng);
  pair.anchor1.x = pair.anchor2.x + 2 * step(rng);
  pair.anchor1.y = pair.anchor2.y + 2 * step(rng);
  pair.overlap = compute_overlap(spec, pair.anchor1, pair.anchor2);
  return pair;
}

Image extract_and_resize(const Image& image, GridPoint anchor, std::size_t side_patches, const GridSpec& spec) {
  const long m = long(spec.patch_px);
  const long side = long(side_patches) * m;
  const Image region = crop(image, PixelRect{anchor.x * m, anchor.y * m, side, side});
  return resize(region, spec.resize_px, spec.resize_px);
}

Mask pool_mask(const Mask& mask) {
  if (mask.side() % 2 != 0) {
    throw DimensionError("pool_mask: side " + std::to_string(mask.side()) + " is odd");
  }
  const std::size_t half = mask.side() / 2;
  Mask out(half);
  for (std::size_t r = 0; r < half; ++r) {
    for (std::size_t c = 0; c < half; ++c) {
      out.set(r, c, mask.at(2 * r, 2 * c) | mask.at(2 * r, 2 * c + 1) | mask.at(2 * r + 1, 2 * c) |
                        mask.at(2 * r + 1, 2 * c + 1));
    }
  }
  return out;
}

Mask upsample_mask(const Mask& mask) {
  Mask out(2 * mask.side());
  for (std::size_t r = 0; r < out.side(); ++r) {
    for (std::size_t c = 0; c < out.side(); ++c) out.set(r, c, mask.at(r / 2, c / 2));
  }
  return out;
}

GridBlock token_to_grid(const GridSpec& spec, CropRole role, GridPoint anchor, std::size_t row, std::size_t col) {
  if (row >= spec.token_side || col >= spec.token_side) {
    throw IndexError("token (" + std::to_string(row) + ", " + std::to_string(col) + ") outside the " +
                     std::to_string(spec.token_side) + "x" + std::to_string(spec.token_side) + " token grid");
  }
  const long extent = role == CropRole::c1 ? 1 : 2;
  return {{anchor.x + extent * long(col), anchor.y + extent * long(row)}, std::size_t(extent)};
}

namespace {

// Footprint of a token in source-image pixels.
PixelRect token_pixels(const GridSpec& spec, GridPoint anchor, std::size_t crop_patches, std::size_t index) {
  const long crop_px = long(crop_patches * spec.patch_px);
  const long tok_px = crop_px / long(spec.token_side);
  const long r = long(index / spec.token_side);
  const long c = long(index % spec.token_side);
  const long m = long(spec.patch_px);
  return {anchor.x * m + c * tok_px, anchor.y * m + r * tok_px, tok_px, tok_px};
}

bool contains(const PixelRect& outer, const PixelRect& inner) {
  return inner.x >= outer.x && inner.y >= outer.y && inner.x + inner.width <= outer.x + outer.width &&
         inner.y + inner.height <= outer.y + outer.height;
}

// Overlap rebuilt from pixel rectangles alone.
Overlap pixel_overlap(const GridSpec& spec, GridPoint a1, GridPoint a2) {
  const long m = long(spec.patch_px);
  const PixelRect r1{a1.x * m, a1.y * m, long(spec.c1) * m, long(spec.c1) * m};
  const PixelRect r2{a2.x * m, a2.y * m, long(spec.c2) * m, long(spec.c2) * m};
  const long x0 = std::max(r1.x, r2.x);
  const long y0 = std::max(r1.y, r2.y);
  const long x1 = std::min(r1.x + r1.width, r2.x + r2.width);
  const long y1 = std::min(r1.y + r1.height, r2.y + r2.height);
  const PixelRect inter{x0, y0, std::max(0L, x1 - x0), std::max(0L, y1 - y0)};

  const std::size_t t = spec.token_side;
  Overlap out;
  out.o1 = Mask(t);
  out.o2 = Mask(t);
  for (std::size_t i = 0; i < t * t; ++i) {
    if (contains(inter, token_pixels(spec, a1, spec.c1, i))) out.o1.set(i / t, i % t, true);
  }
  for (std::size_t j = 0; j < t * t; ++j) {
    const PixelRect p = token_pixels(spec, a2, spec.c2, j);
    if (!contains(inter, p)) continue;
    out.o2.set(j / t, j % t, true);
    out.idx2.push_back(j);
    // The four C1 tokens tiling p, in top-left, top-right, bottom-left, bottom-right order.
    std::vector<std::size_t> quad;
    for (std::size_t i = 0; i < t * t; ++i) {
      if (contains(p, token_pixels(spec, a1, spec.c1, i))) quad.push_back(i);
    }
    std::sort(quad.begin(), quad.end(), [&](std::size_t a, std::size_t b) {
      const PixelRect pa = token_pixels(spec, a1, spec.c1, a);
      const PixelRect pb = token_pixels(spec, a1, spec.c1, b);
      return std::pair(pa.y, pa.x) < std::pair(pb.y, pb.x);
    });
    out.idx1.insert(out.idx1.end(), quad.begin(), quad.end());
  }
  return out;
}

}  // namespace

GeometryCheck verify_geometry(const GridSpec& spec, std::size_t samples, std::uint64_t seed, bool corrupt_parity) {
  spec.validate();
  std::mt19937_64 rng(seed);
  GeometryCheck check;
  check.samples = samples;
  for (std::size_t s = 0; s < samples; ++s) {
    CropPair pair = sample_crop_pair(rng, spec);
    GridPoint a1 = pair.anchor1;
    if (corrupt_parity) a1.x += a1.x > pair.anchor2.x ? -1 : 1;
    const std::string where = "sample " + std::to_string(s) + ": C1 at " + to_string(a1) + ", C2 at " +
                              to_string(pair.anchor2);
    try {
      const Overlap got = compute_overlap(spec, a1, pair.anchor2);
      const Overlap want = pixel_overlap(spec, a1, pair.anchor2);
      std::string problem;
      if (got.idx1.size() != 4 * got.idx2.size()) {
        problem = "|idx1| != 4*|idx2|";
      } else if (got.idx2 != want.idx2) {
        problem = "idx2 differs from pixel oracle";
      } else if (got.idx1 != want.idx1) {
        problem = "idx1 differs from pixel oracle";
      } else if (!(got.o1 == want.o1) || !(got.o2 == want.o2)) {
        problem = "masks differ from pixel oracle";
      }
      if (!problem.empty()) {
        ++check.mismatches;
        check.failures.push_back(where + ": " + problem);
      }
    } catch (const GeometryError& e) {
      ++check.mismatches;
      check.failures.push_back(where + ": " + e.what());
    }
  }
  return check;
}

}  // namespace ace
