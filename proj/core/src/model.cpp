#include "ace/model.hpp"

#include <cmath>
#include <numbers>

#include "ace/error.hpp"
#include "ace/numerics/ops.hpp"

namespace ace {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("EncoderConfig: " + what); };
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (token_side == 0) fail("token_side must be positive");
  if (hidden == 0) fail("hidden must be positive");
  if (input_side == 0 || input_side % token_side != 0) {
    fail("input_side " + std::to_string(input_side) + " is not divisible by token_side " +
         std::to_string(token_side));
  }
}

void ParamSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ParameterError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
}

const Tensor& ParamSet::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

Tensor& ParamSet::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

ParamSet ParamSet::clone(bool requires_grad) const {
  ParamSet out;
  for (const auto& [name, t] : entries_) {
    out.add(name, Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), requires_grad));
  }
  return out;
}

void ParamSet::set_requires_grad(bool on) {
  for (auto& [name, t] : entries_) t.set_requires_grad(on);
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

bool ParamSet::equals(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [na, a] = entries_[i];
    const auto& [nb, b] = other.entries_[i];
    if (na != nb || a.shape() != b.shape()) return false;
    if (!std::equal(a.values().begin(), a.values().end(), b.values().begin())) return false;
  }
  return true;
}

bool is_weight_matrix(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  return !last.empty() && last.front() == 'w';
}

namespace {

Tensor uniform(std::mt19937_64& rng, num::Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(num::element_count(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor zeros(num::Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones(num::Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return num::add_row(num::matmul(x, w), b); }

Tensor layer_norm(const Tensor& x, const ParamSet& p, const std::string& prefix) {
  return num::add_row(num::mul_row(num::row_standardize(x, 1e-6), p.get(prefix + ".g")), p.get(prefix + ".b"));
}

Tensor mlp(const Tensor& x, const ParamSet& p, const std::string& prefix) {
  const Tensor h = num::gelu(linear(x, p.get(prefix + ".w1"), p.get(prefix + ".b1")));
  return linear(h, p.get(prefix + ".w2"), p.get(prefix + ".b2"));
}

}  // namespace

EncoderState init(const EncoderConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t k = config.embed_dim;
  const std::size_t n = config.tokens();
  const std::size_t h = config.hidden;
  const std::size_t pp = config.patch_pixels();

  ParamSet s;
  s.add("embed.w", uniform(rng, {pp, k}, pp));
  s.add("embed.b", zeros({k}));
  for (std::size_t d = 0; d < config.depth; ++d) {
    const std::string b = "block" + std::to_string(d);
    s.add(b + ".norm1.g", ones({k}));
    s.add(b + ".norm1.b", zeros({k}));
    s.add(b + ".mix.w", uniform(rng, {n, n}, n));
    s.add(b + ".mix.b", zeros({n, 1}));
    s.add(b + ".norm2.g", ones({k}));
    s.add(b + ".norm2.b", zeros({k}));
    s.add(b + ".mlp.w1", uniform(rng, {k, h}, k));
    s.add(b + ".mlp.b1", zeros({h}));
    s.add(b + ".mlp.w2", uniform(rng, {h, k}, h));
    s.add(b + ".mlp.b2", zeros({k}));
  }
  s.add("compose.w1", uniform(rng, {4 * k, 4 * k}, 4 * k));
  s.add("compose.b1", zeros({4 * k}));
  s.add("compose.w2", uniform(rng, {4 * k, k}, 4 * k));
  s.add("compose.b2", zeros({k}));
  s.add("decompose.w1", uniform(rng, {k, 4 * k}, k));
  s.add("decompose.b1", zeros({4 * k}));
  s.add("decompose.w2", uniform(rng, {4 * k, 4 * k}, 4 * k));
  s.add("decompose.b2", zeros({4 * k}));

  EncoderState state;
  state.config = config;
  state.teacher = s.clone(false);
  state.student = std::move(s);
  state.center.assign(k, 0.0);
  state.step = 0;
  return state;
}

EncoderState init(const EncoderConfig& config) {
  std::mt19937_64 rng(config.seed);
  return init(config, rng);
}

Tensor image_to_patches(const EncoderConfig& config, const Image& image) {
  if (image.width != config.input_side || image.height != config.input_side) {
    throw DimensionError("encode: expected a " + std::to_string(config.input_side) + "x" +
                         std::to_string(config.input_side) + " image, got " + std::to_string(image.width) + "x" +
                         std::to_string(image.height));
  }
  const std::size_t t = config.token_side;
  const std::size_t ps = config.patch_side();
  std::vector<double> v;
  v.reserve(config.tokens() * config.patch_pixels());
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < t; ++c) {
      for (std::size_t y = 0; y < ps; ++y) {
        for (std::size_t x = 0; x < ps; ++x) v.push_back(image.at(c * ps + x, r * ps + y));
      }
    }
  }
  return Tensor({config.tokens(), config.patch_pixels()}, std::move(v));
}

Tensor encode(const ParamSet& p, const EncoderConfig& config, const Image& image) {
  Tensor x = linear(image_to_patches(config, image), p.get("embed.w"), p.get("embed.b"));
  const Tensor ones_row = Tensor::full({1, config.embed_dim}, 1.0);
  for (std::size_t d = 0; d < config.depth; ++d) {
    const std::string b = "block" + std::to_string(d);
    const Tensor h = layer_norm(x, p, b + ".norm1");
    const Tensor mixed = num::add(num::matmul(p.get(b + ".mix.w"), h), num::matmul(p.get(b + ".mix.b"), ones_row));
    x = num::add(x, mixed);
    x = num::add(x, mlp(layer_norm(x, p, b + ".norm2"), p, b + ".mlp"));
  }
  return x;
}

Tensor compose_head(const ParamSet& p, const EncoderConfig& config, const Tensor& tokens) {
  const std::size_t t = config.token_side;
  const std::size_t k = config.embed_dim;
  if (t % 2 != 0) throw DimensionError("compose_head: token side " + std::to_string(t) + " is odd");
  if (tokens.shape() != num::Shape{t * t, k}) {
    throw DimensionError("compose_head: expected tokens " + num::to_string({t * t, k}) + ", got " +
                         num::to_string(tokens.shape()));
  }
  const std::size_t half = t / 2;
  std::vector<std::size_t> index;
  index.reserve(t * t * k);
  for (std::size_t r = 0; r < half; ++r) {
    for (std::size_t c = 0; c < half; ++c) {
      for (const auto& [dr, dc] : {std::pair{0u, 0u}, {0u, 1u}, {1u, 0u}, {1u, 1u}}) {
        const std::size_t tok = (2 * r + dr) * t + (2 * c + dc);
        for (std::size_t j = 0; j < k; ++j) index.push_back(tok * k + j);
      }
    }
  }
  const Tensor grouped = num::gather(tokens, {half * half, 4 * k}, index);
  return mlp(grouped, p, "compose");
}

Tensor decompose_head(const ParamSet& p, const EncoderConfig& config, const Tensor& tokens) {
  const std::size_t t = config.token_side;
  const std::size_t k = config.embed_dim;
  if (tokens.shape() != num::Shape{t * t, k}) {
    throw DimensionError("decompose_head: expected tokens " + num::to_string({t * t, k}) + ", got " +
                         num::to_string(tokens.shape()));
  }
  const Tensor chunks = mlp(tokens, p, "decompose");  // [N × 4K]
  const std::size_t side = 2 * t;
  std::vector<std::size_t> index;
  index.reserve(side * side * k);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t tok = (r / 2) * t + c / 2;
      const std::size_t sub = (r % 2) * 2 + c % 2;
      for (std::size_t j = 0; j < k; ++j) index.push_back(tok * 4 * k + sub * k + j);
    }
  }
  return num::gather(chunks, {side * side, k}, index);
}

double ema_lambda(std::size_t step, std::size_t total_steps, double base) {
  if (total_steps == 0) throw ParameterError("ema_lambda: total_steps must be positive");
  if (step > total_steps) {
    throw ParameterError("ema_lambda: step " + std::to_string(step) + " exceeds total " + std::to_string(total_steps));
  }
  if (step == total_steps) return 1.0;
  const double phase = std::numbers::pi * double(step) / double(total_steps);
  return 1.0 - (1.0 - base) * (std::cos(phase) + 1.0) / 2.0;
}

void ema_update(EncoderState& state, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("ema_update: lambda must lie in [0, 1]");
  auto& te = state.teacher.entries();
  const auto& se = state.student.entries();
  for (std::size_t i = 0; i < te.size(); ++i) {
    auto dst = te[i].second.mutable_values();
    const auto src = se[i].second.values();
    // Written as a step toward the student so equal weights stay bit-identical.
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = lambda == 0.0 ? src[j] : dst[j] + (1.0 - lambda) * (src[j] - dst[j]);
    }
  }
}

}  // namespace ace
