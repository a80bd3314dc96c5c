#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ace/image.hpp"

namespace ace {

// Landmark order is fixed; mirrored pairs are adjacent (left first) and the
// medial landmark is last.
inline constexpr std::size_t kLandmarkCount = 9;
inline constexpr std::array<std::string_view, kLandmarkCount> kLandmarkNames = {
    "lobe_apex_l",      "lobe_apex_r",      "lobe_base_l",   "lobe_base_r", "clavicle_lateral_l",
    "clavicle_lateral_r", "clavicle_medial_l", "clavicle_medial_r", "disc_center"};

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Body plan in units of the image side, origin top-left, x to the right.
// Bilateral structures give the left-hand instance; the right one mirrors it.
struct PhantomLayout {
  double body_cy = 0.52, body_rx = 0.40, body_ry = 0.42;  // soft tissue ellipse, centred on the midline
  double lobe_dx = 0.19, lobe_cy = 0.54, lobe_rx = 0.13, lobe_ry = 0.27;  // lobe centre offset from midline
  double disc_cy = 0.46, disc_r = 0.085;
  std::size_t ribs = 6;
  double rib_top = 0.33, rib_bottom = 0.77, rib_half_width = 0.34, rib_thickness = 0.016;
  double clav_medial_dx = 0.05, clav_medial_y = 0.25;
  double clav_lateral_dx = 0.30, clav_lateral_y = 0.19;
  double clav_sag = 0.035, clav_thickness = 0.018;

  // Intensities in [0, 1].
  double background = 0.04, tissue = 0.42, lobe = 0.20, disc = 0.70, rib = 0.16, clavicle = 0.78;
  double texture_amplitude = 0.07, texture_period = 0.08, texture_angle = 0.6;  // radians, left lobe
  double detail_scale = 0.06;  // cell size of the per-instance detail field
  double edge_px = 1.5;  // soft edge width
};

// Per-instance variation. Translations and scale are fractions of the image
// side / of the structure size; all-zero reproduces the canonical layout.
struct PhantomJitter {
  double translate = 0.015;
  double scale = 0.04;
  double intensity = 0.02;       // per-structure level offset amplitude
  double texture_angle = 0.5;    // radians
  double texture_period = 0.25;  // relative
  double texture_phase = 1.0;    // fraction of a full cycle
  double detail = 0.0;           // amplitude of a smooth random field inside the body

  static PhantomJitter none() { return {0, 0, 0, 0, 0, 0, 0}; }
};

struct PhantomSpec {
  std::size_t side = 256;
  PhantomLayout layout;
  PhantomJitter jitter;
  double intensity_noise = 0.01;  // additive Gaussian sigma

  void validate() const;
};

struct Phantom {
  std::string instance_id;
  std::uint64_t seed = 0;
  Image image;
  std::array<Point, kLandmarkCount> landmarks{};
};

// Deterministic in (seed, spec).
Phantom generate(std::uint64_t seed, const PhantomSpec& spec);

// Canonical landmark positions (pixels) and the per-landmark radius that the
// jitter can move them by at most.
std::array<Point, kLandmarkCount> canonical_landmarks(const PhantomSpec& spec);
std::array<double, kLandmarkCount> landmark_envelope(const PhantomSpec& spec);

// Index of the mirror partner, or the landmark itself for the medial one.
std::size_t mirror_landmark(std::size_t index);

// Binary PGM (P5). Writes 16-bit big-endian; reads 8- and 16-bit.
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

struct ManifestRecord {
  std::string instance_id;
  std::string relative_path;
  std::array<Point, kLandmarkCount> landmarks{};
  std::uint64_t seed = 0;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::filesystem::path root;  // directory holding the manifest file
  std::vector<ManifestRecord> records;

  std::filesystem::path image_path(std::size_t i) const { return root / records.at(i).relative_path; }
  Image load_image(std::size_t i) const { return read_pgm(image_path(i)); }
};

inline constexpr std::string_view kManifestFile = "manifest.tsv";

// Writes <dir>/images/<id>.pgm for each phantom and <dir>/manifest.tsv.
void build_manifest(const std::filesystem::path& dir, const std::vector<Phantom>& phantoms);
// Reads the manifest at `path` (a file, or a directory containing
// manifest.tsv). Throws FormatError for malformed lines and IoError naming the
// record when an image file is missing.
Manifest load_manifest(const std::filesystem::path& path);

// `count` phantoms with seeds derive_seed(master_seed, i) and ids
// "phantom_<i>" zero-padded to 5 digits.
std::vector<Phantom> generate_set(std::uint64_t master_seed, std::size_t count, const PhantomSpec& spec);

}  // namespace ace
