#include "ace/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ace/error.hpp"
#include "ace/log.hpp"
#include "ace/numerics/ops.hpp"
#include "ace/rng.hpp"
#include "ace/synthgen.hpp"
#include "json.hpp"

namespace ace {

namespace {

// Seed streams under the run seed.
constexpr std::uint64_t kOrderStream = 1;
constexpr std::uint64_t kPairStream = 2;

void require(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("TrainConfig: " + what);
}

}  // namespace

void AugmentConfig::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("AugmentConfig: " + what); };
  if (!(brightness >= 0) || !(contrast >= 0) || !(noise >= 0)) fail("amplitudes must be non-negative");
  if (contrast >= 1) fail("contrast must be below 1");
  if (!(blur_probability >= 0 && blur_probability <= 1)) fail("blur_probability must lie in [0, 1]");
  if (!(blur_sigma > 0)) fail("blur_sigma must be positive");
}

PhotometricParams draw_photometric(std::mt19937_64& rng, const AugmentConfig& config) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PhotometricParams p;
  p.shift = config.brightness * u(rng);
  p.gain = 1.0 + config.contrast * u(rng);
  p.noise_sigma = config.noise;
  p.blur_sigma = unit(rng) < config.blur_probability ? config.blur_sigma : 0.0;
  return p;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0)) throw ParameterError("gaussian_blur: sigma must be positive");
  const long radius = long(std::ceil(3 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  for (long i = -radius; i <= radius; ++i) k[std::size_t(i + radius)] = std::exp(-double(i * i) / (2 * sigma * sigma));
  const double norm = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= norm;

  const long w = long(image.width), h = long(image.height);
  auto clamp_to = [](long v, long n) { return std::clamp(v, 0L, n - 1); };
  Image tmp(image.width, image.height);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) acc += k[std::size_t(i + radius)] * image.at(std::size_t(clamp_to(x + i, w)), std::size_t(y));
      tmp.at(std::size_t(x), std::size_t(y)) = acc;
    }
  }
  Image out(image.width, image.height);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) acc += k[std::size_t(i + radius)] * tmp.at(std::size_t(x), std::size_t(clamp_to(y + i, h)));
      out.at(std::size_t(x), std::size_t(y)) = acc;
    }
  }
  return out;
}

Image apply_photometric(const Image& image, const PhotometricParams& p, std::mt19937_64& rng) {
  Image out = image;
  if (!out.pixels.empty() && (p.gain != 1.0 || p.shift != 0.0)) {
    const double mean = std::accumulate(out.pixels.begin(), out.pixels.end(), 0.0) / double(out.pixels.size());
    for (double& v : out.pixels) v = mean + p.gain * (v - mean) + p.shift;
  }
  if (p.blur_sigma > 0) out = gaussian_blur(out, p.blur_sigma);
  if (p.noise_sigma > 0) {
    std::normal_distribution<double> n(0.0, p.noise_sigma);
    for (double& v : out.pixels) v += n(rng);
  }
  clamp_unit(out);
  return out;
}

Image augment(std::mt19937_64& rng, const Image& image, const AugmentConfig& config) {
  const PhotometricParams p = draw_photometric(rng, config);
  return apply_photometric(image, p, rng);
}

void TrainConfig::validate() const {
  require(epochs > 0, "epochs must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(warmup_epochs <= epochs, "warmup_epochs must not exceed epochs");
  require(base_lr > 0, "base_lr must be positive");
  require(weight_decay_start >= 0 && weight_decay_end >= 0, "weight decay must be non-negative");
  require(grad_clip_norm > 0, "grad_clip_norm must be positive");
  require(ema_base > 0 && ema_base <= 1, "ema_base must lie in (0, 1]");
  require(weights.global >= 0 && weights.comp >= 0 && weights.decomp >= 0, "loss weights must be non-negative");
  require(alpha_comp > 0 && alpha_comp < 1 && alpha_decomp > 0 && alpha_decomp < 1, "alphas must lie in (0, 1)");
  require(tau_s > 0 && tau_t > 0, "temperatures must be positive");
  require(center_rate >= 0 && center_rate <= 1, "center_rate must lie in [0, 1]");
  require(kernel_size % 2 == 1, "kernel_size must be odd");
  require(kernel_sigma > 0, "kernel_sigma must be positive");
  require(threads > 0, "threads must be positive");
  grid.validate();
  encoder.validate();
  require(encoder.token_side == grid.token_side, "model token side differs from grid.token_side");
  require(encoder.input_side == grid.resize_px, "model input side differs from grid.resize_px");
  augment.validate();
}

TrainConfig TrainConfig::from_settings(Settings& s) {
  TrainConfig c;
  c.epochs = s.take_size("train.epochs", c.epochs);
  c.batch_size = s.take_size("train.batch_size", c.batch_size);
  c.warmup_epochs = s.take_size("train.warmup_epochs", c.warmup_epochs);
  c.base_lr = s.take_double("train.base_lr", c.base_lr);
  c.weight_decay_start = s.take_double("train.weight_decay_start", c.weight_decay_start);
  c.weight_decay_end = s.take_double("train.weight_decay_end", c.weight_decay_end);
  c.grad_clip_norm = s.take_double("train.grad_clip_norm", c.grad_clip_norm);
  c.ema_base = s.take_double("train.ema_base", c.ema_base);
  c.checkpoint_every = s.take_size("train.checkpoint_every", c.checkpoint_every);

  c.weights.global = s.take_double("loss.lambda_global", c.weights.global);
  c.weights.comp = s.take_double("loss.lambda_comp", c.weights.comp);
  c.weights.decomp = s.take_double("loss.lambda_decomp", c.weights.decomp);
  c.alpha_comp = s.take_double("loss.alpha_comp", c.alpha_comp);
  c.alpha_decomp = s.take_double("loss.alpha_decomp", c.alpha_decomp);
  c.tau_s = s.take_double("loss.tau_s", c.tau_s);
  c.tau_t = s.take_double("loss.tau_t", c.tau_t);
  c.centering = s.take_bool("loss.centering", c.centering);
  c.center_rate = s.take_double("loss.center_rate", c.center_rate);
  const std::string form = s.take_string("loss.form", "two_sided");
  if (form == "two_sided") {
    c.loss_form = LossForm::two_sided;
  } else if (form == "positive_only") {
    c.loss_form = LossForm::positive_only;
  } else {
    throw ParameterError("loss.form must be two_sided or positive_only (got '" + form + "')");
  }
  c.kernel_size = s.take_size("loss.kernel_size", c.kernel_size);
  c.kernel_sigma = s.take_double("loss.kernel_sigma", c.kernel_sigma);

  c.augment.brightness = s.take_double("augment.brightness", c.augment.brightness);
  c.augment.contrast = s.take_double("augment.contrast", c.augment.contrast);
  c.augment.noise = s.take_double("augment.noise", c.augment.noise);
  c.augment.blur_probability = s.take_double("augment.blur_probability", c.augment.blur_probability);
  c.augment.blur_sigma = s.take_double("augment.blur_sigma", c.augment.blur_sigma);

  c.seed = s.take_u64("seed", c.seed);
  c.threads = s.take_size("threads", c.threads);
  c.manifest = s.take_string("manifest", c.manifest);
  c.grid = read_grid(s, c.grid);
  c.encoder = read_encoder(s, c.grid, c.encoder);
  c.validate();
  return c;
}

void TrainConfig::write(Settings& s) const {
  s.set("train.epochs", std::to_string(epochs));
  s.set("train.batch_size", std::to_string(batch_size));
  s.set("train.warmup_epochs", std::to_string(warmup_epochs));
  s.set("train.base_lr", format_double(base_lr));
  s.set("train.weight_decay_start", format_double(weight_decay_start));
  s.set("train.weight_decay_end", format_double(weight_decay_end));
  s.set("train.grad_clip_norm", format_double(grad_clip_norm));
  s.set("train.ema_base", format_double(ema_base));
  s.set("train.checkpoint_every", std::to_string(checkpoint_every));
  s.set("loss.lambda_global", format_double(weights.global));
  s.set("loss.lambda_comp", format_double(weights.comp));
  s.set("loss.lambda_decomp", format_double(weights.decomp));
  s.set("loss.alpha_comp", format_double(alpha_comp));
  s.set("loss.alpha_decomp", format_double(alpha_decomp));
  s.set("loss.tau_s", format_double(tau_s));
  s.set("loss.tau_t", format_double(tau_t));
  s.set("loss.centering", centering ? "true" : "false");
  s.set("loss.center_rate", format_double(center_rate));
  s.set("loss.form", loss_form == LossForm::two_sided ? "two_sided" : "positive_only");
  s.set("loss.kernel_size", std::to_string(kernel_size));
  s.set("loss.kernel_sigma", format_double(kernel_sigma));
  s.set("augment.brightness", format_double(augment.brightness));
  s.set("augment.contrast", format_double(augment.contrast));
  s.set("augment.noise", format_double(augment.noise));
  s.set("augment.blur_probability", format_double(augment.blur_probability));
  s.set("augment.blur_sigma", format_double(augment.blur_sigma));
  s.set("seed", std::to_string(seed));
  s.set("threads", std::to_string(threads));
  s.set("manifest", manifest);
  write_grid(s, grid);
  write_encoder(s, encoder);
}

Schedule make_schedule(const TrainConfig& config, std::size_t dataset_size) {
  if (dataset_size < config.batch_size) {
    throw ParameterError("training set has " + std::to_string(dataset_size) + " images, fewer than batch_size " +
                         std::to_string(config.batch_size));
  }
  Schedule s;
  s.steps_per_epoch = dataset_size / config.batch_size;
  s.warmup_steps = config.warmup_epochs * s.steps_per_epoch;
  s.total_steps = config.epochs * s.steps_per_epoch;
  return s;
}

double learning_rate(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base) {
  if (step > total_steps) throw ParameterError("learning_rate: step beyond the schedule");
  if (step < warmup_steps) return base * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return base;
  const double phase = std::numbers::pi * double(step - warmup_steps) / double(total_steps - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(phase));
}

double weight_decay(std::size_t step, std::size_t total_steps, double start, double end) {
  if (total_steps == 0 || step > total_steps) throw ParameterError("weight_decay: step outside the schedule");
  if (step == total_steps) return end;
  const double phase = std::numbers::pi * double(step) / double(total_steps);
  return start + (end - start) * 0.5 * (1.0 - std::cos(phase));
}

AdamState make_adam_state(const ParamSet& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adamw_step(ParamSet& params, AdamState& state, double lr, double wd, const AdamW& hyper) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw DimensionError("adamw_step: optimizer state does not match the parameter set");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(hyper.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(hyper.beta2, double(state.t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, t] = entries[i];
    auto p = t.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size() || v.size() != p.size()) {
      throw DimensionError("adamw_step: moment size mismatch for '" + name + "'");
    }
    const auto g = t.grad();
    const double decay = is_weight_matrix(name) ? lr * wd : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = hyper.beta1 * m[j] + (1 - hyper.beta1) * gj;
      v[j] = hyper.beta2 * v[j] + (1 - hyper.beta2) * gj * gj;
      p[j] -= decay * p[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.eps);
    }
  }
}

double global_grad_norm(const ParamSet& params) {
  double sq = 0;
  for (const auto& [name, t] : params.entries()) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(ParamSet& params, double max_norm) {
  if (!(max_norm > 0)) throw ParameterError("clip_grad_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, t] : params.entries()) {
      if (!t.has_grad()) continue;
      for (double& g : t.node()->grad_buffer()) g *= s;
    }
  }
  return norm;
}

std::vector<TrainingImage> load_training_images(const std::filesystem::path& manifest) {
  const Manifest m = load_manifest(manifest);
  std::vector<TrainingImage> out;
  out.reserve(m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) out.push_back({m.records[i].instance_id, m.load_image(i)});
  return out;
}

PairSample make_pair_sample(const TrainingImage& image, std::uint64_t seed, const TrainConfig& config) {
  std::mt19937_64 rng(seed);
  PairSample s;
  s.image_id = image.id;
  s.seed = seed;
  s.pair = sample_crop_pair(rng, config.grid);
  s.c1 = augment(rng, extract_and_resize(image.image, s.pair.anchor1, config.grid.c1, config.grid), config.augment);
  s.c2 = augment(rng, extract_and_resize(image.image, s.pair.anchor2, config.grid.c2, config.grid), config.augment);
  s.comp = build_target(s.pair, config.grid, TargetRole::composition, config.kernel_size, config.kernel_sigma);
  s.decomp = build_target(s.pair, config.grid, TargetRole::decomposition, config.kernel_size, config.kernel_sigma);
  return s;
}

TeacherTokens teacher_tokens(const EncoderState& state, const PairSample& p) {
  return {encode(state.teacher, state.config, p.c1), encode(state.teacher, state.config, p.c2)};
}

PairLoss pair_loss(const ParamSet& student, const EncoderState& state, const PairSample& p, const TrainConfig& config) {
  return pair_loss(student, state, teacher_tokens(state, p), p, config);
}

PairLoss pair_loss(const ParamSet& student, const EncoderState& state, const TeacherTokens& teacher,
                   const PairSample& p, const TrainConfig& config) {
  const bool positive_only = config.loss_form == LossForm::positive_only;
  const EncoderConfig& ec = state.config;
  const Tensor s1 = encode(student, ec, p.c1);
  const Tensor s2 = encode(student, ec, p.c2);
  const Tensor& t1 = teacher.c1;
  const Tensor& t2 = teacher.c2;

  // Composition: fine C1 tokens merged by the student against coarse C2
  // teacher tokens; decomposition runs the other way.
  PairLoss out;
  out.comp = matching_loss_from_logits(matching_logits(t2, compose_head(student, ec, s1)), p.comp, config.alpha_comp,
                                       positive_only);
  out.decomp = matching_loss_from_logits(matching_logits(t1, decompose_head(student, ec, s2)), p.decomp,
                                         config.alpha_decomp, positive_only);
  const Mask& o1 = p.pair.overlap.o1;
  const Mask& o2 = p.pair.overlap.o2;
  GlobalTerm ga = global_loss(s1, o1, t2, o2, state.center, config.tau_s, config.tau_t, config.centering);
  GlobalTerm gb = global_loss(s2, o2, t1, o1, state.center, config.tau_s, config.tau_t, config.centering);
  out.global = num::scale(num::add(ga.loss, gb.loss), 0.5);
  out.total = num::add(num::add(num::scale(out.global, config.weights.global), num::scale(out.comp, config.weights.comp)),
                       num::scale(out.decomp, config.weights.decomp));
  out.teacher_pooled = {std::move(ga.teacher_pooled), std::move(gb.teacher_pooled)};
  return out;
}

BatchLoss forward_backward(const EncoderState& state, std::span<const PairSample> batch, const TrainConfig& config) {
  if (batch.empty()) throw ParameterError("forward_backward: empty batch");
  BatchLoss out;
  num::Tape64 tape;
  const auto recording = tape.record();
  Tensor sum = Tensor::scalar(0.0);
  double g_sum = 0, c_sum = 0, d_sum = 0;
  for (const PairSample& p : batch) {
    try {
      PairLoss l = pair_loss(state.student, state, p, config);
      const double gv = l.global.item(), cv = l.comp.item(), dv = l.decomp.item();
      if (!std::isfinite(gv) || !std::isfinite(cv) || !std::isfinite(dv)) {
        std::ostringstream msg;
        msg << "non-finite loss (global " << gv << ", comp " << cv << ", decomp " << dv << ")";
        throw DomainError(msg.str());
      }
      g_sum += gv;
      c_sum += cv;
      d_sum += dv;
      sum = num::add(sum, l.total);
      for (auto& pooled : l.teacher_pooled) out.teacher_pooled.push_back(std::move(pooled));
    } catch (const DomainError& e) {
      std::ostringstream msg;
      msg << e.what() << " on image '" << p.image_id << "', pair seed " << p.seed << ", C1 at "
          << to_string(p.pair.anchor1) << ", C2 at " << to_string(p.pair.anchor2);
      log::error(msg.str());
      throw DomainError(msg.str());
    }
  }
  const double n = double(batch.size());
  const Tensor loss = num::scale(sum, 1.0 / n);
  tape.backward(loss);
  out.losses = total_loss(g_sum / n, c_sum / n, d_sum / n, config.weights);
  return out;
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["ema_lambda"] = ema_lambda;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["loss_global"] = global;
  j["loss_comp"] = comp;
  j["loss_decomp"] = decomp;
  j["loss_total"] = total;
  j["grad_norm"] = grad_norm;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.ema_lambda = j.at("ema_lambda").get<double>();
    r.lr = j.at("lr").get<double>();
    r.weight_decay = j.at("weight_decay").get<double>();
    r.global = j.at("loss_global").get<double>();
    r.comp = j.at("loss_comp").get<double>();
    r.decomp = j.at("loss_decomp").get<double>();
    r.total = j.at("loss_total").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad metrics record: " + std::string(e.what()));
  }
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json(line));
  }
  return out;
}

std::vector<double> epoch_mean_total(std::span<const MetricsRecord> records) {
  std::vector<double> sum, count;
  for (const auto& r : records) {
    if (r.epoch >= sum.size()) {
      sum.resize(r.epoch + 1, 0.0);
      count.resize(r.epoch + 1, 0.0);
    }
    sum[r.epoch] += r.total;
    count[r.epoch] += 1;
  }
  for (std::size_t e = 0; e < sum.size(); ++e) sum[e] = count[e] > 0 ? sum[e] / count[e] : 0.0;
  return sum;
}

TrainerState make_trainer_state(const TrainConfig& config) {
  TrainerState s{init(config.encoder), {}};
  s.adam = make_adam_state(s.model.student);
  return s;
}

MetricsRecord train_step(TrainerState& state, std::span<const PairSample> batch, const TrainConfig& config,
                         const Schedule& schedule) {
  EncoderState& model = state.model;
  const std::size_t step = model.step;
  if (step >= schedule.total_steps) throw ParameterError("train_step: the schedule is already complete");
  model.student.zero_grad();
  BatchLoss loss = forward_backward(model, batch, config);

  MetricsRecord r;
  r.step = step;
  r.epoch = schedule.steps_per_epoch ? step / schedule.steps_per_epoch : 0;
  r.grad_norm = clip_grad_norm(model.student, config.grad_clip_norm);
  r.lr = learning_rate(step, schedule.warmup_steps, schedule.total_steps, config.base_lr);
  r.weight_decay = weight_decay(step, schedule.total_steps, config.weight_decay_start, config.weight_decay_end);
  adamw_step(model.student, state.adam, r.lr, r.weight_decay);
  model.student.zero_grad();
  update_center(model.center, loss.teacher_pooled, config.center_rate);
  r.ema_lambda = ema_lambda(step, schedule.total_steps, config.ema_base);
  ema_update(model, r.ema_lambda);
  ++model.step;

  r.global = loss.losses.global;
  r.comp = loss.losses.comp;
  r.decomp = loss.losses.decomp;
  r.total = loss.losses.total;
  return r;
}

Checkpoint to_checkpoint(const TrainerState& state, const TrainConfig& config) {
  Checkpoint ckpt = to_checkpoint(state.model);
  Settings s;
  config.write(s);
  for (const auto& [k, v] : s.entries()) ckpt.header["config." + k] = v;
  ckpt.header["adam.t"] = std::to_string(state.adam.t);
  const auto& entries = state.model.student.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ckpt.blobs.emplace_back("adam_m/" + entries[i].first, Tensor(entries[i].second.shape(), state.adam.m.at(i)));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ckpt.blobs.emplace_back("adam_v/" + entries[i].first, Tensor(entries[i].second.shape(), state.adam.v.at(i)));
  }
  return ckpt;
}

void save_training_checkpoint(const std::filesystem::path& path, const TrainerState& state, const TrainConfig& config) {
  write_checkpoint(path.string(), to_checkpoint(state, config));
}

void load_training_checkpoint(const std::filesystem::path& path, TrainerState& state) {
  const Checkpoint ckpt = read_checkpoint(path.string());
  TrainerState loaded{state_from_checkpoint(ckpt), {}};
  for (const auto& [name, t] : loaded.model.student.entries()) {
    for (const char* prefix : {"adam_m/", "adam_v/"}) {
      const Tensor& blob = ckpt.blob(prefix + name);
      if (blob.shape() != t.shape()) throw FormatError("checkpoint blob '" + std::string(prefix) + name + "' has the wrong shape");
    }
    loaded.adam.m.emplace_back(ckpt.blob("adam_m/" + name).values().begin(), ckpt.blob("adam_m/" + name).values().end());
    loaded.adam.v.emplace_back(ckpt.blob("adam_v/" + name).values().begin(), ckpt.blob("adam_v/" + name).values().end());
  }
  const auto it = ckpt.header.find("adam.t");
  if (it == ckpt.header.end()) throw FormatError(path.string() + ": header lacks 'adam.t'");
  try {
    loaded.adam.t = std::stoull(it->second);
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": adam.t is not an integer");
  }
  state = std::move(loaded);
}

TrainConfig config_from_checkpoint(const Checkpoint& ckpt) {
  Settings s;
  for (const auto& [k, v] : ckpt.header) {
    if (k.rfind("config.", 0) == 0) s.set(k.substr(7), v);
  }
  TrainConfig c = TrainConfig::from_settings(s);
  s.reject_unused();
  return c;
}

namespace {

std::vector<PairSample> make_batch(const std::vector<TrainingImage>& data, std::span<const std::size_t> members,
                                   std::size_t step, const TrainConfig& config) {
  std::vector<PairSample> batch(members.size());
  auto build = [&](std::size_t j) {
    batch[j] = make_pair_sample(data[members[j]], derive_seed(config.seed, {kPairStream, step, j}), config);
  };
  if (config.threads <= 1 || members.size() < 2) {
    for (std::size_t j = 0; j < members.size(); ++j) build(j);
    return batch;
  }
  // Each sample depends only on its own seed, so the split does not matter.
  const std::size_t workers = std::min(config.threads, members.size());
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t j = w; j < members.size(); j += workers) build(j);
    }));
  }
  for (auto& j : jobs) j.get();
  return batch;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {kOrderStream, epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Keeps the records of steps already covered by the checkpoint.
void truncate_metrics(const std::filesystem::path& path, std::size_t steps) {
  if (!std::filesystem::exists(path)) return;
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (MetricsRecord::from_json(line).step < steps) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

TrainResult train_loop(const TrainConfig& config, const std::vector<TrainingImage>& data, const RunOptions& options) {
  config.validate();
  const Schedule schedule = make_schedule(config, data.size());
  for (const auto& img : data) {
    if (img.image.width != config.grid.image_px() || img.image.height != config.grid.image_px()) {
      throw DimensionError("image '" + img.id + "' is " + std::to_string(img.image.width) + "x" +
                           std::to_string(img.image.height) + ", the grid expects " +
                           std::to_string(config.grid.image_px()) + " pixels per side");
    }
  }
  std::filesystem::create_directories(options.out_dir);
  const auto metrics_path = options.out_dir / kMetricsFile;
  const auto last_path = options.out_dir / kLastCheckpoint;

  TrainResult result{make_trainer_state(config), {}, false};
  if (options.resume && std::filesystem::exists(last_path)) {
    load_training_checkpoint(last_path, result.state);
    if (result.state.model.config != config.encoder) throw ParameterError("resume: checkpoint model differs from the config");
    log::info("resuming " + last_path.string() + " at step " + std::to_string(result.state.model.step));
    truncate_metrics(metrics_path, result.state.model.step);
  } else {
    std::ofstream(metrics_path, std::ios::trunc);
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  std::size_t done = 0;
  while (result.state.model.step < schedule.total_steps) {
    if (options.stop_after_steps && done >= *options.stop_after_steps) return result;
    const std::size_t step = result.state.model.step;
    const std::size_t epoch = step / schedule.steps_per_epoch;
    const std::size_t in_epoch = step % schedule.steps_per_epoch;
    const auto order = epoch_order(data.size(), epoch, config.seed);
    const std::span<const std::size_t> members(order.data() + in_epoch * config.batch_size, config.batch_size);
    const auto batch = make_batch(data, members, step, config);
    const MetricsRecord r = train_step(result.state, batch, config, schedule);
    metrics << r.to_json() << '\n' << std::flush;
    result.metrics.push_back(r);
    ++done;

    if (in_epoch + 1 == schedule.steps_per_epoch) {
      const std::span<const MetricsRecord> all(result.metrics);
      double sum = 0;
      std::size_t n = 0;
      for (const auto& m : all) {
        if (m.epoch == epoch) {
          sum += m.total;
          ++n;
        }
      }
      if (n > 0) log::info("epoch " + std::to_string(epoch) + " mean L_total " + format_double(sum / double(n)));
      if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
        save_training_checkpoint(last_path, result.state, config);
      }
    }
  }
  save_training_checkpoint(options.out_dir / kFinalCheckpoint, result.state, config);
  result.completed = true;
  return result;
}

TrainResult train_loop(const TrainConfig& config, const RunOptions& options) {
  if (config.manifest.empty()) throw ParameterError("train_loop: no manifest configured");
  return train_loop(config, load_training_images(config.manifest), options);
}

}  // namespace ace
