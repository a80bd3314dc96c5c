#include "ace/probes.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>
#include <random>

#include "ace/error.hpp"
#include "ace/numerics/ops.hpp"
#include "ace/rng.hpp"

namespace ace {

namespace {

// Seed streams, one per probe.
enum Stream : std::uint64_t { kComp = 11, kDecomp, kRetrieval, kCorrespondence, kShuffle };

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_mix(std::uint64_t& h, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    h ^= (bits >> (8 * i)) & 0xff;
    h *= kFnvPrime;
  }
}

std::uint64_t checksum(const std::vector<std::vector<double>>& features) {
  std::uint64_t h = kFnvOffset;
  for (const auto& f : features) {
    for (double v : f) fnv_mix(h, v);
  }
  return h;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    }));
  }
  for (auto& j : jobs) j.get();
}

std::string fmt(double v) { return format_double(v); }

std::vector<double> mean_vector(const std::vector<std::vector<double>>& vs) {
  std::vector<double> m(vs.front().size(), 0.0);
  for (const auto& v : vs) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
  }
  for (double& x : m) x /= double(vs.size());
  return m;
}

std::vector<double> normalized(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0) {
    for (double& x : v) x /= n;
  }
  return v;
}

// Index of the largest score, lowest index on ties; reports whether a tie
// occurred at the top.
std::pair<std::size_t, bool> argmax(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  std::size_t hits = 0;
  for (double s : scores) hits += s == scores[best] ? 1 : 0;
  return {best, hits > 1};
}

PixelRect random_square(std::mt19937_64& rng, std::size_t side, const ProbeConfig& c) {
  std::uniform_real_distribution<double> frac(c.patch_frac_min, c.patch_frac_max);
  long size = std::max(2L, std::lround(frac(rng) * double(side)));
  size -= size % 2;
  std::uniform_int_distribution<long> pos(0, long(side) - size);
  const long x = pos(rng);
  const long y = pos(rng);
  return {x, y, size, size};
}

// Batch members: batch_size distinct image indices.
std::vector<std::size_t> draw_members(std::mt19937_64& rng, std::size_t n, std::size_t batch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(batch);
  return order;
}

// Identity used for scoring slot j; a fixed permutation when the labels are
// shuffled.
std::vector<std::size_t> truth_map(std::size_t batch, bool shuffle, std::uint64_t seed) {
  std::vector<std::size_t> t(batch);
  std::iota(t.begin(), t.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(t.begin(), t.end(), rng);
  }
  return t;
}

std::size_t image_side(std::span<const LabeledImage> images) {
  if (images.empty()) throw ParameterError("probe: no images");
  const std::size_t side = images.front().image.width;
  for (const auto& im : images) {
    if (im.image.width != side || im.image.height != side) {
      throw DimensionError("probe: image '" + im.id + "' is not " + std::to_string(side) + " pixels square");
    }
  }
  return side;
}

PixelRect centred(Point p, long size) {
  return {std::lround(p.x - double(size) / 2), std::lround(p.y - double(size) / 2), size, size};
}

std::size_t instance_count(std::span<const LabeledImage> images, const ProbeConfig& c) {
  return c.instances == 0 ? images.size() : std::min(c.instances, images.size());
}

}  // namespace

std::vector<LabeledImage> load_labeled_images(const Manifest& manifest) {
  std::vector<LabeledImage> out;
  out.reserve(manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    out.push_back({manifest.records[i].instance_id, manifest.load_image(i), manifest.records[i].landmarks});
  }
  return out;
}

std::vector<LabeledImage> to_labeled(const std::vector<Phantom>& phantoms) {
  std::vector<LabeledImage> out;
  out.reserve(phantoms.size());
  for (const auto& p : phantoms) out.push_back({p.instance_id, p.image, p.landmarks});
  return out;
}

void ProbeConfig::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("ProbeConfig: " + what); };
  if (n_parts != 2 && n_parts != 4) fail("n_parts must be 2 or 4");
  if (samples == 0 || rounds == 0 || batch_size == 0 || pairs == 0) fail("counts must be positive");
  if (histogram_bins == 0) fail("histogram_bins must be positive");
  if (!(patch_frac_min > 0 && patch_frac_min <= patch_frac_max && patch_frac_max <= 1)) {
    fail("patch fractions must satisfy 0 < min <= max <= 1");
  }
  if (!(window_frac > 0 && window_frac <= 1)) fail("window_frac must lie in (0, 1]");
  if (!(landmark_patch_frac > 0 && landmark_patch_frac <= 1)) fail("landmark_patch_frac must lie in (0, 1]");
  if (threads == 0) fail("threads must be positive");
}

ProbeConfig ProbeConfig::from_settings(Settings& s) {
  ProbeConfig c;
  c.seed = s.take_u64("seed", c.seed);
  c.threads = s.take_size("threads", c.threads);
  c.samples = s.take_size("probe.samples", c.samples);
  c.n_parts = s.take_size("probe.n_parts", c.n_parts);
  c.histogram_bins = s.take_size("probe.histogram_bins", c.histogram_bins);
  c.batch_size = s.take_size("probe.batch_size", c.batch_size);
  c.rounds = s.take_size("probe.rounds", c.rounds);
  c.patch_frac_min = s.take_double("probe.patch_frac_min", c.patch_frac_min);
  c.patch_frac_max = s.take_double("probe.patch_frac_max", c.patch_frac_max);
  c.normalize_before_subtract = s.take_bool("probe.normalize_before_subtract", c.normalize_before_subtract);
  c.shuffle_labels = s.take_bool("probe.shuffle_labels", c.shuffle_labels);
  c.window_frac = s.take_double("probe.window_frac", c.window_frac);
  c.stride = s.take_size("probe.stride", c.stride);
  c.pairs = s.take_size("probe.pairs", c.pairs);
  c.landmark_patch_frac = s.take_double("probe.landmark_patch_frac", c.landmark_patch_frac);
  c.instances = s.take_size("probe.instances", c.instances);
  c.validate();
  return c;
}

void ProbeConfig::write(Settings& s) const {
  s.set("seed", std::to_string(seed));
  s.set("threads", std::to_string(threads));
  s.set("probe.samples", std::to_string(samples));
  s.set("probe.n_parts", std::to_string(n_parts));
  s.set("probe.histogram_bins", std::to_string(histogram_bins));
  s.set("probe.batch_size", std::to_string(batch_size));
  s.set("probe.rounds", std::to_string(rounds));
  s.set("probe.patch_frac_min", fmt(patch_frac_min));
  s.set("probe.patch_frac_max", fmt(patch_frac_max));
  s.set("probe.normalize_before_subtract", normalize_before_subtract ? "true" : "false");
  s.set("probe.shuffle_labels", shuffle_labels ? "true" : "false");
  s.set("probe.window_frac", fmt(window_frac));
  s.set("probe.stride", std::to_string(stride));
  s.set("probe.pairs", std::to_string(pairs));
  s.set("probe.landmark_patch_frac", fmt(landmark_patch_frac));
  s.set("probe.instances", std::to_string(instances));
}

double ProbeReport::stat(const std::string& name) const {
  for (const auto& [k, v] : summary) {
    if (k == name) return v;
  }
  throw IndexError("probe report '" + probe + "' has no statistic '" + name + "'");
}

std::size_t ProbeReport::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw IndexError("probe report '" + probe + "' has no column '" + name + "'");
  return std::size_t(it - columns.begin());
}

std::vector<double> ProbeReport::column_values(const std::string& name) const {
  const std::size_t c = column(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(std::stod(r.at(c)));
  return out;
}

void ProbeReport::write_csv(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    const auto path = dir / (probe + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
    out << '\n';
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
      out << '\n';
    }
  }
  const auto path = dir / (probe + "_summary.csv");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "statistic,value\n";
  out << "checkpoint_id," << checkpoint_id << '\n';
  out << "feature_checksum," << feature_checksum << '\n';
  for (const auto& [k, v] : summary) out << k << ',' << fmt(v) << '\n';
  for (const auto& f : flags) out << "flag," << f << '\n';
}

std::string checkpoint_id(const EncoderState& state) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : state.student.entries()) {
    for (double v : t.values()) fnv_mix(h, v);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::vector<double> embed_image(const EncoderState& state, const Image& image) {
  const std::size_t h0 = state.config.input_side;
  const Image in = image.width == h0 && image.height == h0 ? image : resize(image, h0, h0);
  const Tensor tokens = encode(state.student, state.config, in);
  const Tensor pooled = num::mean_rows(tokens.detach());
  return {pooled.values().begin(), pooled.values().end()};
}

std::vector<double> embed_region(const EncoderState& state, const Image& image, const PixelRect& rect) {
  if (rect.width <= 0 || rect.height <= 0) {
    throw GeometryError("embed_region: empty rect " + std::to_string(rect.width) + "x" + std::to_string(rect.height));
  }
  return embed_image(state, crop(image, rect));
}

std::vector<double> embed_window(const EncoderState& state, const Image& image, const PixelRect& rect) {
  if (rect.width <= 0 || rect.height <= 0) throw GeometryError("embed_window: empty rect");
  return embed_image(state, crop_zero_padded(image, rect));
}

ProbeReport compositionality_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                   const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  std::mt19937_64 rng(derive_seed(c.seed, kComp));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::bernoulli_distribution coin(0.5);

  struct Sample {
    std::size_t image;
    PixelRect whole;
    bool vertical;
    std::vector<PixelRect> parts;
  };
  std::vector<Sample> samples;
  for (std::size_t s = 0; s < c.samples; ++s) {
    Sample smp{pick(rng), random_square(rng, side, c), coin(rng), {}};
    const PixelRect& w = smp.whole;
    const long h = w.width / 2;
    if (c.n_parts == 4) {
      smp.parts = {{w.x, w.y, h, h}, {w.x + h, w.y, h, h}, {w.x, w.y + h, h, h}, {w.x + h, w.y + h, h, h}};
    } else if (smp.vertical) {
      smp.parts = {{w.x, w.y, h, w.height}, {w.x + h, w.y, h, w.height}};
    } else {
      smp.parts = {{w.x, w.y, w.width, h}, {w.x, w.y + h, w.width, h}};
    }
    samples.push_back(std::move(smp));
  }

  const std::size_t per = 1 + c.n_parts;
  std::vector<std::vector<double>> feats(samples.size() * per);
  parallel_for(feats.size(), c.threads, [&](std::size_t i) {
    const Sample& smp = samples[i / per];
    const std::size_t k = i % per;
    feats[i] = embed_region(state, images[smp.image].image, k == 0 ? smp.whole : smp.parts[k - 1]);
  });

  ProbeReport r;
  r.probe = "compositionality";
  r.checkpoint_id = checkpoint_id(state);
  r.feature_checksum = checksum(feats);
  r.columns = {"sample", "image_id", "x", "y", "size", "split", "cosine"};
  std::vector<double> cos(samples.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    std::vector<std::vector<double>> parts(feats.begin() + long(s * per + 1), feats.begin() + long(s * per + per));
    cos[s] = cosine(feats[s * per], mean_vector(parts));
    const Sample& smp = samples[s];
    const char* split = c.n_parts == 4 ? "quad" : (smp.vertical ? "vertical" : "horizontal");
    r.rows.push_back({std::to_string(s), images[smp.image].id, std::to_string(smp.whole.x), std::to_string(smp.whole.y),
                      std::to_string(smp.whole.width), split, fmt(cos[s])});
  }
  const double mean = std::accumulate(cos.begin(), cos.end(), 0.0) / double(cos.size());
  double var = 0;
  for (double v : cos) var += (v - mean) * (v - mean);
  r.summary = {{"samples", double(cos.size())},
               {"n_parts", double(c.n_parts)},
               {"mean", mean},
               {"std", std::sqrt(var / double(cos.size()))}};
  // Fixed bins over [-1, 1].
  std::vector<double> hist(c.histogram_bins, 0.0);
  for (double v : cos) {
    auto b = std::size_t(std::floor((v + 1.0) / 2.0 * double(c.histogram_bins)));
    hist[std::min(b, c.histogram_bins - 1)] += 1;
  }
  for (std::size_t b = 0; b < hist.size(); ++b) {
    const double lo = -1.0 + 2.0 * double(b) / double(c.histogram_bins);
    r.summary.emplace_back("bin_" + fmt(lo), hist[b]);
  }
  return r;
}

ProbeReport decompositionality_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                     const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  if (images.size() < c.batch_size) {
    throw ParameterError("decompositionality: need " + std::to_string(c.batch_size) + " images, have " +
                         std::to_string(images.size()));
  }
  std::mt19937_64 rng(derive_seed(c.seed, kDecomp));
  const std::size_t b = c.batch_size;
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::vector<PixelRect>> rects;
  for (std::size_t round = 0; round < c.rounds; ++round) {
    members.push_back(draw_members(rng, images.size(), b));
    rects.emplace_back();
    for (std::size_t j = 0; j < b; ++j) rects.back().push_back(random_square(rng, side, c));
  }

  // Per slot: whole, excised, part.
  const std::size_t n = c.rounds * b;
  std::vector<std::vector<double>> feats(3 * n);
  parallel_for(n, c.threads, [&](std::size_t i) {
    const Image& img = images[members[i / b][i % b]].image;
    const PixelRect& rect = rects[i / b][i % b];
    Image excised = img;
    for (long y = rect.y; y < rect.y + rect.height; ++y) {
      for (long x = rect.x; x < rect.x + rect.width; ++x) excised.at(std::size_t(x), std::size_t(y)) = 0.0;
    }
    feats[3 * i] = embed_image(state, img);
    feats[3 * i + 1] = embed_image(state, excised);
    feats[3 * i + 2] = embed_region(state, img, rect);
  });

  ProbeReport r;
  r.probe = "decompositionality";
  r.checkpoint_id = checkpoint_id(state);
  r.feature_checksum = checksum(feats);
  r.columns = {"round", "slot", "image_id", "x", "y", "size", "truth", "predicted", "correct", "tie", "score"};
  std::size_t correct = 0, ties = 0;
  for (std::size_t round = 0; round < c.rounds; ++round) {
    const auto truth = truth_map(b, c.shuffle_labels, derive_seed(c.seed, {kShuffle, kDecomp, round}));
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t i = round * b + j;
      std::vector<double> d(feats[3 * i].size());
      const auto whole = c.normalize_before_subtract ? normalized(feats[3 * i]) : feats[3 * i];
      const auto rest = c.normalize_before_subtract ? normalized(feats[3 * i + 1]) : feats[3 * i + 1];
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = whole[k] - rest[k];
      std::vector<double> scores(b);
      for (std::size_t m = 0; m < b; ++m) scores[m] = cosine(d, feats[3 * (round * b + m) + 2]);
      const auto [pred, tie] = argmax(scores);
      const bool ok = pred == truth[j];
      correct += ok ? 1 : 0;
      ties += tie ? 1 : 0;
      const PixelRect& rect = rects[round][j];
      r.rows.push_back({std::to_string(round), std::to_string(j), images[members[round][j]].id, std::to_string(rect.x),
                        std::to_string(rect.y), std::to_string(rect.width), std::to_string(truth[j]),
                        std::to_string(pred), ok ? "1" : "0", tie ? "1" : "0", fmt(scores[pred])});
    }
  }
  if (ties > 0) r.flags.push_back("ties broken by lowest index: " + std::to_string(ties));
  r.summary = {{"samples", double(n)},
               {"batch_size", double(b)},
               {"accuracy", double(correct) / double(n)},
               {"chance", 1.0 / double(b)},
               {"ties", double(ties)}};
  return r;
}

ProbeReport retrieval_probe(const EncoderState& state, std::span<const LabeledImage> images, const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  if (images.size() < c.batch_size) {
    throw ParameterError("retrieval: need " + std::to_string(c.batch_size) + " images, have " +
                         std::to_string(images.size()));
  }
  std::mt19937_64 rng(derive_seed(c.seed, kRetrieval));
  const std::size_t b = c.batch_size;
  std::uniform_int_distribution<std::size_t> slot(0, b - 1);
  struct Query {
    std::vector<std::size_t> members;
    std::size_t source;
    PixelRect rect;
  };
  std::vector<Query> queries;
  for (std::size_t q = 0; q < c.rounds; ++q) {
    Query qu;
    qu.members = draw_members(rng, images.size(), b);
    qu.source = slot(rng);
    qu.rect = random_square(rng, side, c);
    queries.push_back(std::move(qu));
  }

  // Whole-image embeddings for every image any batch uses.
  std::vector<char> used(images.size(), 0);
  for (const auto& q : queries) {
    for (std::size_t m : q.members) used[m] = 1;
  }
  std::vector<std::vector<double>> whole(images.size());
  parallel_for(images.size(), c.threads, [&](std::size_t i) {
    if (used[i]) whole[i] = embed_image(state, images[i].image);
  });
  std::vector<std::vector<double>> query_feats(queries.size());
  parallel_for(queries.size(), c.threads, [&](std::size_t q) {
    query_feats[q] = embed_region(state, images[queries[q].members[queries[q].source]].image, queries[q].rect);
  });

  ProbeReport r;
  r.probe = "retrieval";
  r.checkpoint_id = checkpoint_id(state);
  {
    std::vector<std::vector<double>> all;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (used[i]) all.push_back(whole[i]);
    }
    all.insert(all.end(), query_feats.begin(), query_feats.end());
    r.feature_checksum = checksum(all);
  }
  r.columns = {"query", "image_id", "x", "y", "size", "truth", "predicted", "correct", "tie", "margin"};
  std::size_t correct = 0, ties = 0;
  double margin_sum = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Query& qu = queries[q];
    const auto truth = truth_map(b, c.shuffle_labels, derive_seed(c.seed, {kShuffle, kRetrieval, q}));
    const std::size_t t = truth[qu.source];
    std::vector<double> scores(b);
    for (std::size_t m = 0; m < b; ++m) scores[m] = cosine(query_feats[q], whole[qu.members[m]]);
    const auto [pred, tie] = argmax(scores);
    double best_other = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < b; ++m) {
      if (m != t) best_other = std::max(best_other, scores[m]);
    }
    const double margin = b > 1 ? scores[t] - best_other : 0.0;
    const bool ok = pred == t;
    correct += ok ? 1 : 0;
    ties += tie ? 1 : 0;
    margin_sum += margin;
    r.rows.push_back({std::to_string(q), images[qu.members[qu.source]].id, std::to_string(qu.rect.x),
                      std::to_string(qu.rect.y), std::to_string(qu.rect.width), std::to_string(t), std::to_string(pred),
                      ok ? "1" : "0", tie ? "1" : "0", fmt(margin)});
  }
  if (b == 1) r.flags.push_back("degenerate: batch of 1 is correct by construction");
  if (ties > 0) r.flags.push_back("ties broken by lowest index: " + std::to_string(ties));
  r.summary = {{"queries", double(queries.size())},
               {"batch_size", double(b)},
               {"accuracy", double(correct) / double(queries.size())},
               {"chance", 1.0 / double(b)},
               {"mean_margin", margin_sum / double(queries.size())},
               {"ties", double(ties)}};
  return r;
}

namespace {

struct WindowGeometry {
  long window;
  long stride;
  long positions;  // grid points per axis, centres at 0, stride, ...
};

WindowGeometry window_geometry(std::size_t side, std::size_t window, std::size_t stride) {
  if (stride == 0) throw ParameterError("correspondence: stride must be positive");
  if (window == 0 || window > side) {
    throw ParameterError("correspondence: window " + std::to_string(window) + " must lie in [1, " +
                         std::to_string(side) + "]");
  }
  if (stride > window) {
    throw ParameterError("correspondence: stride " + std::to_string(stride) + " exceeds window " + std::to_string(window));
  }
  return {long(window), long(stride), (long(side) - 1) / long(stride) + 1};
}

PixelRect window_at(const WindowGeometry& g, long cx, long cy) {
  return {cx - g.window / 2, cy - g.window / 2, g.window, g.window};
}

std::vector<std::vector<double>> key_dictionary(const EncoderState& state, const Image& key, const WindowGeometry& g,
                                                std::size_t threads) {
  std::vector<std::vector<double>> dict(std::size_t(g.positions * g.positions));
  parallel_for(dict.size(), threads, [&](std::size_t i) {
    const long gy = long(i) / g.positions, gx = long(i) % g.positions;
    dict[i] = embed_window(state, key, window_at(g, gx * g.stride, gy * g.stride));
  });
  return dict;
}

CorrespondenceResult match_landmarks(const EncoderState& state, const LabeledImage& query, const LabeledImage& key,
                                     const WindowGeometry& g, const std::vector<std::vector<double>>& dict) {
  CorrespondenceResult out;
  double sum = 0;
  for (std::size_t l = 0; l < kLandmarkCount; ++l) {
    const Point q = query.landmarks[l];
    auto snap = [&](double v) {
      return std::clamp(std::lround(v / double(g.stride)), 0L, g.positions - 1) * g.stride;
    };
    const auto f = embed_window(state, query.image, window_at(g, snap(q.x), snap(q.y)));
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dict.size(); ++i) {
      double d = 0;
      for (std::size_t k = 0; k < f.size(); ++k) d += (f[k] - dict[i][k]) * (f[k] - dict[i][k]);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    const Point pred{double((long(best) % g.positions) * g.stride), double((long(best) / g.positions) * g.stride)};
    out.predicted[l] = pred;
    out.error[l] = std::hypot(pred.x - key.landmarks[l].x, pred.y - key.landmarks[l].y);
    sum += out.error[l];
  }
  out.mean_error = sum / double(kLandmarkCount);
  return out;
}

std::size_t default_stride(std::size_t side) { return std::max<std::size_t>(1, std::size_t(std::lround(double(side) / 128))); }

}  // namespace

CorrespondenceResult correspondence(const EncoderState& state, const LabeledImage& query, const LabeledImage& key,
                                    std::size_t window, std::size_t stride) {
  if (query.image.width != key.image.width || !query.image.is_square() || !key.image.is_square()) {
    throw DimensionError("correspondence: query and key must be equal squares");
  }
  const WindowGeometry g = window_geometry(key.image.width, window, stride);
  return match_landmarks(state, query, key, g, key_dictionary(state, key.image, g, 1));
}

ProbeReport correspondence_probe(const EncoderState& state, std::span<const LabeledImage> images,
                                 const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  if (images.size() < 2) throw ParameterError("correspondence: need at least two images");
  const std::size_t window = std::size_t(std::lround(c.window_frac * double(side)));
  const WindowGeometry g = window_geometry(side, window, c.stride ? c.stride : default_stride(side));

  std::mt19937_64 rng(derive_seed(c.seed, kCorrespondence));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t p = 0; p < c.pairs; ++p) {
    const std::size_t q = pick(rng);
    std::size_t k = pick(rng);
    while (k == q) k = pick(rng);
    pairs.emplace_back(q, k);
  }

  ProbeReport r;
  r.probe = "correspondence";
  r.checkpoint_id = checkpoint_id(state);
  r.columns = {"pair", "query_id", "key_id", "landmark", "pred_x", "pred_y", "true_x", "true_y", "error"};
  std::uint64_t h = kFnvOffset;
  std::array<double, kLandmarkCount> per{};
  double total = 0;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const LabeledImage& q = images[pairs[p].first];
    const LabeledImage& k = images[pairs[p].second];
    const auto dict = key_dictionary(state, k.image, g, c.threads);
    for (const auto& f : dict) {
      for (double v : f) fnv_mix(h, v);
    }
    const CorrespondenceResult res = match_landmarks(state, q, k, g, dict);
    for (std::size_t l = 0; l < kLandmarkCount; ++l) {
      per[l] += res.error[l];
      total += res.error[l];
      r.rows.push_back({std::to_string(p), q.id, k.id, std::string(kLandmarkNames[l]), fmt(res.predicted[l].x),
                        fmt(res.predicted[l].y), fmt(k.landmarks[l].x), fmt(k.landmarks[l].y), fmt(res.error[l])});
    }
  }
  r.feature_checksum = h;
  r.summary = {{"pairs", double(pairs.size())},
               {"window", double(g.window)},
               {"stride", double(g.stride)},
               {"mean_error", total / double(pairs.size() * kLandmarkCount)}};
  for (std::size_t l = 0; l < kLandmarkCount; ++l) {
    r.summary.emplace_back("error_" + std::string(kLandmarkNames[l]), per[l] / double(pairs.size()));
  }
  return r;
}

ProbeReport symmetry_probe(const EncoderState& state, std::span<const LabeledImage> images, const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  const long patch = std::max(1L, std::lround(c.landmark_patch_frac * double(side)));
  const std::size_t n = instance_count(images, c);
  constexpr std::size_t kPairs = kLandmarkCount / 2;

  // Per instance and pair: L, flipped L, R.
  std::vector<std::vector<double>> feats(n * kPairs * 3);
  parallel_for(n * kPairs, c.threads, [&](std::size_t i) {
    const LabeledImage& im = images[i / kPairs];
    const std::size_t left = 2 * (i % kPairs);
    const std::size_t right = mirror_landmark(left);
    const Image pl = crop_zero_padded(im.image, centred(im.landmarks[left], patch));
    const Image pr = crop_zero_padded(im.image, centred(im.landmarks[right], patch));
    feats[3 * i] = embed_image(state, pl);
    feats[3 * i + 1] = embed_image(state, flip_horizontal(pl));
    feats[3 * i + 2] = embed_image(state, pr);
  });

  ProbeReport r;
  r.probe = "symmetry";
  r.checkpoint_id = checkpoint_id(state);
  r.feature_checksum = checksum(feats);
  r.columns = {"instance_id", "left", "right", "cos_flipped", "cos_control", "gap"};
  std::array<double, kPairs> gap_sum{};
  double flipped_sum = 0, control_sum = 0;
  for (std::size_t i = 0; i < n * kPairs; ++i) {
    const std::size_t left = 2 * (i % kPairs);
    const double flipped = cosine(feats[3 * i + 1], feats[3 * i + 2]);
    const double control = cosine(feats[3 * i], feats[3 * i + 2]);
    gap_sum[i % kPairs] += flipped - control;
    flipped_sum += flipped;
    control_sum += control;
    r.rows.push_back({images[i / kPairs].id, std::string(kLandmarkNames[left]),
                      std::string(kLandmarkNames[mirror_landmark(left)]), fmt(flipped), fmt(control),
                      fmt(flipped - control)});
  }
  const double count = double(n * kPairs);
  r.summary = {{"instances", double(n)},
               {"mean_cos_flipped", flipped_sum / count},
               {"mean_cos_control", control_sum / count},
               {"mean_gap", (flipped_sum - control_sum) / count}};
  for (std::size_t p = 0; p < kPairs; ++p) {
    r.summary.emplace_back("gap_" + std::string(kLandmarkNames[2 * p]), gap_sum[p] / double(n));
  }
  return r;
}

std::vector<LandmarkEmbedding> landmark_embeddings(const EncoderState& state, std::span<const LabeledImage> images,
                                                   const ProbeConfig& c) {
  c.validate();
  const std::size_t side = image_side(images);
  const long patch = std::max(1L, std::lround(c.landmark_patch_frac * double(side)));
  const std::size_t n = instance_count(images, c);
  std::vector<LandmarkEmbedding> out(n * kLandmarkCount);
  parallel_for(out.size(), c.threads, [&](std::size_t i) {
    const LabeledImage& im = images[i / kLandmarkCount];
    const std::size_t l = i % kLandmarkCount;
    out[i] = {im.id, l, embed_window(state, im.image, centred(im.landmarks[l], patch))};
  });
  return out;
}

ProbeReport landmark_separability(const EncoderState& state, std::span<const LabeledImage> images,
                                  const ProbeConfig& c) {
  const std::size_t n = instance_count(images, c);
  if (n < 2) throw ParameterError("landmark_separability: needs at least two instances, got " + std::to_string(n));
  const auto emb = landmark_embeddings(state, images, c);
  const std::size_t k = emb.front().values.size();

  // Class sums over all instances; leaving one out subtracts its vector.
  std::vector<std::vector<double>> sums(kLandmarkCount, std::vector<double>(k, 0.0));
  for (const auto& e : emb) {
    for (std::size_t d = 0; d < k; ++d) sums[e.landmark][d] += e.values[d];
  }

  ProbeReport r;
  r.probe = "separability";
  r.checkpoint_id = checkpoint_id(state);
  {
    std::vector<std::vector<double>> all;
    for (const auto& e : emb) all.push_back(e.values);
    r.feature_checksum = checksum(all);
  }
  r.columns = {"instance_id", "landmark", "predicted", "correct"};
  std::size_t correct = 0;
  std::array<double, kLandmarkCount> per{};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < kLandmarkCount; ++l) {
      const auto& v = emb[i * kLandmarkCount + l].values;
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t cls = 0; cls < kLandmarkCount; ++cls) {
        double d = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const double own = emb[i * kLandmarkCount + cls].values[j];
          const double centroid = (sums[cls][j] - own) / double(n - 1);
          d += (v[j] - centroid) * (v[j] - centroid);
        }
        if (d < best_d) {
          best_d = d;
          best = cls;
        }
      }
      const bool ok = best == l;
      correct += ok ? 1 : 0;
      per[l] += ok ? 1 : 0;
      r.rows.push_back({images[i].id, std::string(kLandmarkNames[l]), std::string(kLandmarkNames[best]), ok ? "1" : "0"});
    }
  }
  r.summary = {{"instances", double(n)}, {"accuracy", double(correct) / double(n * kLandmarkCount)}};
  for (std::size_t l = 0; l < kLandmarkCount; ++l) {
    r.summary.emplace_back("accuracy_" + std::string(kLandmarkNames[l]), per[l] / double(n));
  }
  return r;
}

void write_embeddings_csv(const std::filesystem::path& path, std::span<const LandmarkEmbedding> embeddings) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t k = embeddings.empty() ? 0 : embeddings.front().values.size();
  out << "instance_id,landmark";
  for (std::size_t d = 0; d < k; ++d) out << ",e" << d;
  out << '\n';
  for (const auto& e : embeddings) {
    out << e.instance_id << ',' << kLandmarkNames.at(e.landmark);
    for (double v : e.values) out << ',' << fmt(v);
    out << '\n';
  }
}

}  // namespace ace
