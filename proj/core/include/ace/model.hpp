#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ace/image.hpp"
#include "ace/numerics/tensor.hpp"

namespace ace {

using Tensor = num::Tensor64;

struct EncoderConfig {
  std::size_t embed_dim = 32;   // K
  std::size_t token_side = 8;   // T
  std::size_t input_side = 64;  // H0
  std::size_t depth = 2;
  std::size_t hidden = 64;  // per-token MLP width inside encoder blocks
  std::uint64_t seed = 0;

  std::size_t tokens() const { return token_side * token_side; }
  std::size_t patch_side() const { return input_side / token_side; }
  std::size_t patch_pixels() const { return patch_side() * patch_side(); }

  // Throws ParameterError on the first violated constraint.
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Named parameter tensors in a fixed insertion order. Names follow
// "<module>.<tensor>", e.g. "block0.mlp.w1"; weight matrices have a final
// component starting with 'w', gains and biases do not.
class ParamSet {
 public:
  void add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  // Deep copy with every tensor a fresh leaf.
  ParamSet clone(bool requires_grad) const;
  void set_requires_grad(bool on);
  void zero_grad();

  // True when the values (not the nodes) match exactly.
  bool equals(const ParamSet& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

bool is_weight_matrix(const std::string& name);

struct EncoderState {
  EncoderConfig config;
  ParamSet student;
  ParamSet teacher;
  std::vector<double> center;  // K-vector, EMA of pooled teacher outputs
  std::size_t step = 0;
};

// Fan-in scaled uniform weights, zero biases, unit norm gains. The teacher is
// a copy of the student and never requires gradients.
EncoderState init(const EncoderConfig& config, std::mt19937_64& rng);
EncoderState init(const EncoderConfig& config);

// [H0×H0] image -> [N × patch_pixels], token (r, c) in row r·T + c.
Tensor image_to_patches(const EncoderConfig& config, const Image& image);

// Token map [N×K], N = T². Gradients are recorded when a tape is active and
// the parameters require them.
Tensor encode(const ParamSet& params, const EncoderConfig& config, const Image& image);

// [N×K] -> [(N/4)×K]: each 2×2 token block, concatenated top-left, top-right,
// bottom-left, bottom-right, through a 4K -> 4K -> K MLP.
Tensor compose_head(const ParamSet& params, const EncoderConfig& config, const Tensor& tokens);

// [N×K] -> [4N×K] on the (2T)×(2T) grid: per token a K -> 4K -> 4K MLP whose
// output is chunked into the four sub-positions in the same order.
Tensor decompose_head(const ParamSet& params, const EncoderConfig& config, const Tensor& tokens);

// 1 - (1 - base)(cos(pi·step/total) + 1)/2.
double ema_lambda(std::size_t step, std::size_t total_steps, double base = 0.996);

// teacher <- lambda·teacher + (1 - lambda)·student, parameter by parameter.
void ema_update(EncoderState& state, double lambda);

// Named blobs plus a text header of key/value pairs.
struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::string, Tensor>> blobs;

  const Tensor& blob(const std::string& name) const;
};

// "ACE1" magic, header, then blobs as little-endian 64-bit floats. Writes via
// a temporary file and rename.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws FormatError (with byte offset) on any malformed or truncated input.
Checkpoint read_checkpoint(const std::string& path);

// Config echo, step, student/*, teacher/*, center.
Checkpoint to_checkpoint(const EncoderState& state);
EncoderState state_from_checkpoint(const Checkpoint& ckpt);

std::map<std::string, std::string> config_echo(const EncoderConfig& config);
EncoderConfig config_from_echo(const std::map<std::string, std::string>& header);

}  // namespace ace
