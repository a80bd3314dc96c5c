#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ace/config.hpp"
#include "ace/cropgrid.hpp"
#include "ace/image.hpp"
#include "ace/model.hpp"
#include "ace/objective.hpp"

namespace ace {

// Photometric jitter only; pixel positions never move, so crop
// correspondences stay exact.
struct AugmentConfig {
  double brightness = 0.1;  // additive shift drawn from ±brightness
  double contrast = 0.1;    // gain about the image mean drawn from 1 ± contrast
  double noise = 0.01;      // Gaussian sigma
  double blur_probability = 0.0;
  double blur_sigma = 0.6;

  void validate() const;
};

struct PhotometricParams {
  double shift = 0;
  double gain = 1;
  double noise_sigma = 0;
  double blur_sigma = 0;  // 0 disables the blur
};

PhotometricParams draw_photometric(std::mt19937_64& rng, const AugmentConfig& config);
// gain about the image mean, then shift, blur, noise (drawn from `rng`) and a
// clamp to [0, 1].
Image apply_photometric(const Image& image, const PhotometricParams& params, std::mt19937_64& rng);
Image augment(std::mt19937_64& rng, const Image& image, const AugmentConfig& config);

// Separable Gaussian, radius ceil(3σ), edge pixels repeated.
Image gaussian_blur(const Image& image, double sigma);

enum class LossForm { two_sided, positive_only };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::size_t warmup_epochs = 3;
  double base_lr = 5e-4;
  double weight_decay_start = 0.04;
  double weight_decay_end = 0.4;
  double grad_clip_norm = 0.8;
  double ema_base = 0.996;

  LossWeights weights;
  double alpha_comp = 0.9;
  double alpha_decomp = 0.99;
  double tau_s = 0.1;
  double tau_t = 0.04;
  bool centering = true;
  double center_rate = 0.9;
  LossForm loss_form = LossForm::two_sided;
  std::size_t kernel_size = 3;
  double kernel_sigma = 1.0;

  std::uint64_t seed = 0;
  std::string manifest;
  GridSpec grid = GridSpec::desk_defaults();
  EncoderConfig encoder;
  AugmentConfig augment;
  std::size_t checkpoint_every = 1;  // epochs between checkpoints, 0 = final only
  std::size_t threads = 1;

  // Throws ParameterError on the first violated constraint.
  void validate() const;

  // Consumes the trainer's keys; token_side and input_side follow the grid.
  static TrainConfig from_settings(Settings& s);
  void write(Settings& s) const;
};

struct Schedule {
  std::size_t steps_per_epoch = 0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
};

// Full batches only; the remainder of an epoch's shuffled order is skipped.
Schedule make_schedule(const TrainConfig& config, std::size_t dataset_size);

// base·step/warmup during warmup, then a cosine from base down to 0 at
// total_steps.
double learning_rate(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base);
// Cosine from `start` at step 0 to `end` at total_steps.
double weight_decay(std::size_t step, std::size_t total_steps, double start, double end);

// First and second moments per parameter, in ParamSet order.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(const ParamSet& params);
// Decoupled decay on weight matrices only, then the bias-corrected Adam step.
// Parameters without a gradient are treated as having gradient 0.
void adamw_step(ParamSet& params, AdamState& state, double lr, double wd, const AdamW& hyper = {});

double global_grad_norm(const ParamSet& params);
// Rescales every gradient so the global norm is at most max_norm and returns
// the norm before clipping.
double clip_grad_norm(ParamSet& params, double max_norm);

struct TrainingImage {
  std::string id;
  Image image;
};

std::vector<TrainingImage> load_training_images(const std::filesystem::path& manifest);

// One crop pair, augmented and resized for both networks.
struct PairSample {
  std::string image_id;
  std::uint64_t seed = 0;
  CropPair pair;
  Image c1;
  Image c2;
  MatchTarget comp;
  MatchTarget decomp;
};

PairSample make_pair_sample(const TrainingImage& image, std::uint64_t seed, const TrainConfig& config);

struct PairLoss {
  Tensor global, comp, decomp, total;  // total is the weighted sum
  std::vector<std::vector<double>> teacher_pooled;
};

struct TeacherTokens {
  Tensor c1, c2;
};
TeacherTokens teacher_tokens(const EncoderState& state, const PairSample& sample);

// Loss graph of one pair with `student` in place of state.student; the
// teacher and center come from `state`.
PairLoss pair_loss(const ParamSet& student, const EncoderState& state, const PairSample& sample,
                   const TrainConfig& config);
PairLoss pair_loss(const ParamSet& student, const EncoderState& state, const TeacherTokens& teacher,
                   const PairSample& sample, const TrainConfig& config);

struct BatchLoss {
  LossBreakdown losses;                              // batch means
  std::vector<std::vector<double>> teacher_pooled;  // two per pair
};

// Forward passes for every pair and one backward pass of the batch-mean loss;
// gradients land on the student parameters. Throws DomainError naming the
// pair's image and seed when a loss is not finite.
BatchLoss forward_backward(const EncoderState& state, std::span<const PairSample> batch, const TrainConfig& config);

struct MetricsRecord {
  std::size_t step = 0;   // zero-based
  std::size_t epoch = 0;  // zero-based
  double ema_lambda = 0;
  double lr = 0;
  double weight_decay = 0;
  double global = 0;
  double comp = 0;
  double decomp = 0;
  double total = 0;
  double grad_norm = 0;  // before clipping

  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);
// Mean L_total per epoch, in epoch order.
std::vector<double> epoch_mean_total(std::span<const MetricsRecord> records);

struct TrainerState {
  EncoderState model;
  AdamState adam;
};

TrainerState make_trainer_state(const TrainConfig& config);

// forward_backward, clipping, AdamW at the scheduled rates, center update and
// the EMA teacher update; advances model.step.
MetricsRecord train_step(TrainerState& state, std::span<const PairSample> batch, const TrainConfig& config,
                         const Schedule& schedule);

// Model checkpoint plus Adam moments (adam_m/*, adam_v/*), adam.t and the
// trainer settings under "config." in the header.
Checkpoint to_checkpoint(const TrainerState& state, const TrainConfig& config);
void save_training_checkpoint(const std::filesystem::path& path, const TrainerState& state, const TrainConfig& config);
// Reads the whole file before touching `state`; on any error `state` is
// unchanged.
void load_training_checkpoint(const std::filesystem::path& path, TrainerState& state);
TrainConfig config_from_checkpoint(const Checkpoint& ckpt);

struct RunOptions {
  std::filesystem::path out_dir;
  bool resume = false;                          // continue from out_dir/last.ace when it exists
  std::optional<std::size_t> stop_after_steps;  // stop early once this many steps are done
};

struct TrainResult {
  TrainerState state;
  std::vector<MetricsRecord> metrics;  // this invocation's records
  bool completed = false;
};

inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kLastCheckpoint = "last.ace";
inline constexpr const char* kFinalCheckpoint = "final.ace";

// Writes metrics.jsonl (one record per step), last.ace every
// checkpoint_every epochs and final.ace at the end.
TrainResult train_loop(const TrainConfig& config, const std::vector<TrainingImage>& data, const RunOptions& options);
TrainResult train_loop(const TrainConfig& config, const RunOptions& options);

}  // namespace ace
