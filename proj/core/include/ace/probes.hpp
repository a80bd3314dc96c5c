#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ace/config.hpp"
#include "ace/image.hpp"
#include "ace/model.hpp"
#include "ace/synthgen.hpp"

namespace ace {

// Frozen-checkpoint evaluation. Every probe is a pure function of the
// checkpoint, the images and ProbeConfig::seed.

struct LabeledImage {
  std::string id;
  Image image;
  std::array<Point, kLandmarkCount> landmarks{};
};

std::vector<LabeledImage> load_labeled_images(const Manifest& manifest);
std::vector<LabeledImage> to_labeled(const std::vector<Phantom>& phantoms);

struct ProbeConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t samples = 200;  // compositionality
  std::size_t n_parts = 4;    // 2 or 4
  std::size_t histogram_bins = 20;

  std::size_t batch_size = 32;
  std::size_t rounds = 20;  // decompositionality: batches; retrieval: queries
  double patch_frac_min = 0.3;
  double patch_frac_max = 0.6;
  bool normalize_before_subtract = false;
  bool shuffle_labels = false;  // chance-level control: scores against permuted identities

  double window_frac = 7.0 / 16;  // correspondence window side over image side
  std::size_t stride = 0;         // 0: image side / 128, at least 1
  std::size_t pairs = 50;

  double landmark_patch_frac = 0.25;  // separability and symmetry patch side over image side
  std::size_t instances = 0;          // 0: all images

  void validate() const;
  static ProbeConfig from_settings(Settings& s);
  void write(Settings& s) const;
};

struct ProbeReport {
  std::string probe;
  std::string checkpoint_id;
  std::vector<std::pair<std::string, double>> summary;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;  // per-sample records
  std::vector<std::string> flags;              // degenerate conditions met while scoring
  std::uint64_t feature_checksum = 0;          // over every embedding the probe extracted

  double stat(const std::string& name) const;
  std::size_t column(const std::string& name) const;
  // Numeric view of one per-sample column.
  std::vector<double> column_values(const std::string& name) const;

  // <dir>/<probe>.csv (per-sample) and <dir>/<probe>_summary.csv.
  void write_csv(const std::filesystem::path& dir) const;
};

// Stable id for a parameter set (hex FNV-1a over the student values).
std::string checkpoint_id(const EncoderState& state);

double cosine(std::span<const double> a, std::span<const double> b);

// Mean student token of the H0-resized image.
std::vector<double> embed_image(const EncoderState& state, const Image& image);
// Crop (must lie inside the image; empty rects throw GeometryError), resize,
// embed.
std::vector<double> embed_region(const EncoderState& state, const Image& image, const PixelRect& rect);
// As embed_region, with zero padding wherever the rect leaves the image.
std::vector<double> embed_window(const EncoderState& state, const Image& image, const PixelRect& rect);

ProbeReport compositionality_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                   const ProbeConfig& config);
ProbeReport decompositionality_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                     const ProbeConfig& config);
ProbeReport retrieval_probe(const EncoderState& state, std::span<const LabeledImage> images, const ProbeConfig& config);

struct CorrespondenceResult {
  std::array<Point, kLandmarkCount> predicted{};
  std::array<double, kLandmarkCount> error{};  // pixels, against the key's landmarks
  double mean_error = 0;
};

// Query windows centred on the query landmarks (snapped to the stride grid)
// against every stride-grid window of the key; nearest feature in L2 wins.
// Throws ParameterError when stride > window or the window exceeds the image.
CorrespondenceResult correspondence(const EncoderState& state, const LabeledImage& query, const LabeledImage& key,
                                    std::size_t window, std::size_t stride);
ProbeReport correspondence_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                 const ProbeConfig& config);

ProbeReport symmetry_probe(const EncoderState& state, std::span<const LabeledImage> images, const ProbeConfig& config);

// Leave-one-instance-out nearest-centroid accuracy over landmark identity.
// Needs at least two instances.
ProbeReport landmark_separability(const EncoderState& state, std::span<const LabeledImage> images,
                                  const ProbeConfig& config);

struct LandmarkEmbedding {
  std::string instance_id;
  std::size_t landmark = 0;
  std::vector<double> values;
};
std::vector<LandmarkEmbedding> landmark_embeddings(const EncoderState& state, std::span<const LabeledImage> images,
                                                   const ProbeConfig& config);
// instance_id, landmark, e0..e{K-1}.
void write_embeddings_csv(const std::filesystem::path& path, std::span<const LandmarkEmbedding> embeddings);

}  // namespace ace
