#include "ace/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>

#include "ace/error.hpp"
#include "ace/rng.hpp"

namespace ace {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

struct Jit {
  double tx = 0, ty = 0, scale = 1, level = 0;
};

struct LobeParams {
  Jit j;
  double angle = 0, period = 0, phase = 0;
};

struct ClavicleGeom {
  Point medial, lateral, control;  // mirror frame: w = outward distance from midline
  double thickness = 0;
};

struct Instance {
  Jit body, disc, ribs;
  LobeParams lobe[2];
  Jit clav[2];
};

Instance draw_instance(std::mt19937_64& rng, const PhantomSpec& spec) {
  const PhantomJitter& a = spec.jitter;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto jit = [&] {
    Jit j;
    j.tx = a.translate * u(rng);
    j.ty = a.translate * u(rng);
    j.scale = 1.0 + a.scale * u(rng);
    j.level = a.intensity * u(rng);
    return j;
  };
  Instance in;
  in.body = jit();
  for (auto& lobe : in.lobe) {
    lobe.j = jit();
    lobe.angle = spec.layout.texture_angle + a.texture_angle * u(rng);
    lobe.period = spec.layout.texture_period * (1.0 + a.texture_period * u(rng));
    lobe.phase = kTau * a.texture_phase * u(rng);
  }
  in.disc = jit();
  in.ribs = jit();
  for (auto& c : in.clav) c = jit();
  return in;
}

ClavicleGeom clavicle(const PhantomLayout& l, const Jit& j) {
  const Point m{l.clav_medial_dx, l.clav_medial_y};
  const Point lat{l.clav_lateral_dx, l.clav_lateral_y};
  const Point mid{(m.x + lat.x) / 2, (m.y + lat.y) / 2};
  auto place = [&](Point p) {
    return Point{mid.x + (p.x - mid.x) * j.scale + j.tx, mid.y + (p.y - mid.y) * j.scale + j.ty};
  };
  ClavicleGeom g;
  g.medial = place(m);
  g.lateral = place(lat);
  g.control = place({mid.x, mid.y - 2 * l.clav_sag});
  g.thickness = l.clav_thickness * j.scale;
  return g;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

std::vector<Point> arc_polyline(const ClavicleGeom& g) {
  constexpr int kSegments = 24;
  std::vector<Point> pts;
  for (int i = 0; i <= kSegments; ++i) {
    const double t = double(i) / kSegments;
    const double a = (1 - t) * (1 - t), b = 2 * t * (1 - t), c = t * t;
    pts.push_back({a * g.medial.x + b * g.control.x + c * g.lateral.x, a * g.medial.y + b * g.control.y + c * g.lateral.y});
  }
  return pts;
}

// Zero-mean random values on a square lattice with `cell` spacing (side
// units), smoothstep-interpolated between nodes.
class DetailField {
 public:
  DetailField(std::uint64_t seed, double cell) : cell_(cell), n_(std::size_t(std::ceil(1.0 / cell)) + 2) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    nodes_.resize(n_ * n_);
    for (double& v : nodes_) v = u(rng);
  }

  // (x, y) in side units, [0, 1] each.
  double at(double x, double y) const {
    const double gx = x / cell_, gy = y / cell_;
    const auto ix = std::min(std::size_t(gx), n_ - 2), iy = std::min(std::size_t(gy), n_ - 2);
    const double fx = smooth(gx - double(ix)), fy = smooth(gy - double(iy));
    auto node = [&](std::size_t i, std::size_t j) { return nodes_[j * n_ + i]; };
    const double top = node(ix, iy) + fx * (node(ix + 1, iy) - node(ix, iy));
    const double bot = node(ix, iy + 1) + fx * (node(ix + 1, iy + 1) - node(ix, iy + 1));
    return top + fy * (bot - top);
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  double cell_;
  std::size_t n_;
  std::vector<double> nodes_;
};

// Fraction of a pixel inside a region given its signed distance in pixels.
double coverage(double signed_px, double edge_px) {
  if (edge_px <= 0) return signed_px <= 0 ? 1.0 : 0.0;
  return std::clamp(0.5 - signed_px / edge_px, 0.0, 1.0);
}

// Approximate signed distance (side units) to an axis-aligned ellipse.
double ellipse_distance(double dx, double dy, double rx, double ry) {
  const double q = std::sqrt((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry));
  return (q - 1.0) * std::min(rx, ry);
}

std::array<Point, kLandmarkCount> landmarks_of(const PhantomSpec& spec, const Instance& in) {
  const PhantomLayout& l = spec.layout;
  const double s = double(spec.side);
  auto px = [&](double u, double v) { return Point{(u + 0.5) * s, v * s}; };
  std::array<Point, kLandmarkCount> out{};
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    const LobeParams& lobe = in.lobe[side];
    const double w0 = l.lobe_dx + lobe.j.tx;
    const double v0 = l.lobe_cy + lobe.j.ty;
    const double ry = l.lobe_ry * lobe.j.scale;
    out[0 + side] = px(sign * w0, v0 - ry);
    out[2 + side] = px(sign * w0, v0 + ry);
    const ClavicleGeom g = clavicle(l, in.clav[side]);
    out[4 + side] = px(sign * g.lateral.x, g.lateral.y);
    out[6 + side] = px(sign * g.medial.x, g.medial.y);
  }
  out[8] = px(in.disc.tx, l.disc_cy + in.disc.ty);
  return out;
}

}  // namespace

void PhantomSpec::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("PhantomSpec: " + what); };
  if (side < 16) fail("side must be at least 16");
  if (intensity_noise < 0) fail("intensity_noise must be non-negative");
  const PhantomJitter& j = jitter;
  if (j.translate < 0 || j.scale < 0 || j.intensity < 0 || j.texture_angle < 0 || j.texture_period < 0 ||
      j.texture_phase < 0 || j.detail < 0) {
    fail("jitter amplitudes must be non-negative");
  }
  if (j.scale >= 1 || j.texture_period >= 1) fail("relative jitter amplitudes must be below 1");
  const PhantomLayout& l = layout;
  if (l.ribs < 2) fail("at least two ribs are required");
  if (l.texture_period <= 0) fail("texture_period must be positive");
  if (l.detail_scale <= 0) fail("detail_scale must be positive");
  // Extents at maximal jitter, in side units (u measured from the midline).
  const double t = j.translate, sc = 1 + j.scale;
  const double lobe_out = l.lobe_dx + t + l.lobe_rx * sc;
  const double lobe_top = l.lobe_cy - t - l.lobe_ry * sc, lobe_bot = l.lobe_cy + t + l.lobe_ry * sc;
  const double body_out = t + l.body_rx * sc;
  const double body_top = l.body_cy - t - l.body_ry * sc, body_bot = l.body_cy + t + l.body_ry * sc;
  const double clav_out = l.clav_lateral_dx + t + (l.clav_lateral_dx - l.clav_medial_dx) * j.scale;
  const double clav_top = std::min(l.clav_lateral_y, l.clav_medial_y) - 2 * l.clav_sag * sc - t -
                          l.clav_thickness * sc;
  if (std::max({lobe_out, body_out, clav_out, l.rib_half_width}) >= 0.5) fail("structures leave the image horizontally");
  if (std::min({lobe_top, body_top, clav_top}) <= 0 || std::max(lobe_bot, body_bot) >= 1) {
    fail("structures leave the image vertically");
  }
}

std::size_t mirror_landmark(std::size_t index) {
  if (index >= kLandmarkCount) throw IndexError("landmark index " + std::to_string(index) + " out of range");
  if (index == kLandmarkCount - 1) return index;
  return index ^ 1u;
}

Phantom generate(std::uint64_t seed, const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const Instance in = draw_instance(rng, spec);
  const PhantomLayout& l = spec.layout;
  const std::size_t n = spec.side;
  const double s = double(n);

  ClavicleGeom clav[2];
  std::vector<Point> arcs[2];
  for (int side = 0; side < 2; ++side) {
    clav[side] = clavicle(l, in.clav[side]);
    arcs[side] = arc_polyline(clav[side]);
  }

  const double rib_step = (l.rib_bottom - l.rib_top) / double(l.ribs - 1) * in.ribs.scale;
  const double rib_mid = (l.rib_top + l.rib_bottom) / 2 + in.ribs.ty;

  const DetailField field(derive_seed(seed, 1), l.detail_scale);
  const double detail = spec.jitter.detail;

  Image img(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    const double v = (double(y) + 0.5) / s;
    for (std::size_t x = 0; x < n; ++x) {
      // Exact negation under mirroring x -> n-1-x.
      const double u = (2.0 * double(x) + 1.0 - s) / (2.0 * s);
      double val = l.background;

      const double mb = coverage(
          ellipse_distance(u - in.body.tx, v - l.body_cy - in.body.ty, l.body_rx * in.body.scale,
                           l.body_ry * in.body.scale) * s,
          l.edge_px);
      val += mb * (l.tissue + in.body.level - val);

      const int side = u < 0 ? 0 : 1;
      const double w = std::abs(u);
      const LobeParams& lobe = in.lobe[side];
      const double lx = w - (l.lobe_dx + lobe.j.tx);
      const double ly = v - (l.lobe_cy + lobe.j.ty);
      const double ml = coverage(ellipse_distance(lx, ly, l.lobe_rx * lobe.j.scale, l.lobe_ry * lobe.j.scale) * s,
                                 l.edge_px);
      if (ml > 0) {
        const double phase = kTau * (lx * std::cos(lobe.angle) + ly * std::sin(lobe.angle)) / lobe.period + lobe.phase;
        const double tex = l.texture_amplitude * std::sin(phase);
        val += ml * (l.lobe + lobe.j.level + tex - val);
      }

      if (w <= l.rib_half_width * in.ribs.scale && mb > 0) {
        double best = 1e9;
        for (std::size_t k = 0; k < l.ribs; ++k) {
          const double center = rib_mid + (double(k) - double(l.ribs - 1) / 2) * rib_step + 0.2 * u * u;
          best = std::min(best, std::abs(v - center));
        }
        const double mr = coverage((best - l.rib_thickness * in.ribs.scale) * s, l.edge_px);
        val += mb * mr * (l.rib + in.ribs.level);
      }

      const double dd = std::sqrt((u - in.disc.tx) * (u - in.disc.tx) +
                                  (v - l.disc_cy - in.disc.ty) * (v - l.disc_cy - in.disc.ty));
      const double md = coverage((dd - l.disc_r * in.disc.scale) * s, l.edge_px);
      val += md * (l.disc + in.disc.level - val);

      const Point p{w, v};
      double dc = 1e9;
      const auto& arc = arcs[side];
      for (std::size_t k = 0; k + 1 < arc.size(); ++k) dc = std::min(dc, segment_distance(p, arc[k], arc[k + 1]));
      const double mc = coverage((dc - clav[side].thickness / 2) * s, l.edge_px);
      val += mc * (l.clavicle + in.clav[side].level - val);

      if (detail > 0) val += mb * detail * field.at((double(x) + 0.5) / s, v);
      img.at(x, y) = val;
    }
  }

  if (spec.intensity_noise > 0) {
    std::normal_distribution<double> noise(0.0, spec.intensity_noise);
    for (double& p : img.pixels) p += noise(rng);
  }
  clamp_unit(img);

  Phantom out;
  out.seed = seed;
  out.image = std::move(img);
  out.landmarks = landmarks_of(spec, in);
  return out;
}

std::array<Point, kLandmarkCount> canonical_landmarks(const PhantomSpec& spec) {
  PhantomSpec still = spec;
  still.jitter = PhantomJitter::none();
  std::mt19937_64 rng(0);
  return landmarks_of(still, draw_instance(rng, still));
}

std::array<double, kLandmarkCount> landmark_envelope(const PhantomSpec& spec) {
  const PhantomLayout& l = spec.layout;
  const double s = double(spec.side);
  const double t = std::sqrt(2.0) * spec.jitter.translate * s;
  const double sc = spec.jitter.scale * s;
  const double clav_half = std::hypot(l.clav_lateral_dx - l.clav_medial_dx, l.clav_lateral_y - l.clav_medial_y) / 2;
  std::array<double, kLandmarkCount> r{};
  for (std::size_t i = 0; i < 4; ++i) r[i] = t + sc * l.lobe_ry;
  for (std::size_t i = 4; i < 8; ++i) r[i] = t + sc * clav_half;
  r[8] = t;
  return r;
}

std::vector<Phantom> generate_set(std::uint64_t master_seed, std::size_t count, const PhantomSpec& spec) {
  std::vector<Phantom> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Phantom p = generate(derive_seed(master_seed, i), spec);
    std::ostringstream id;
    id << "phantom_" << std::setw(5) << std::setfill('0') << i;
    p.instance_id = id.str();
    out.push_back(std::move(p));
  }
  return out;
}

// ---- PGM ------------------------------------------------------------------

void write_pgm(const std::filesystem::path& path, const Image& image) {
  if (image.width == 0 || image.height == 0) throw ParameterError("write_pgm: empty image");
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n65535\n";
  out.reserve(out.size() + 2 * image.pixels.size());
  for (double v : image.pixels) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    out.push_back(char(q >> 8));
    out.push_back(char(q & 0xff));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(f), {}};
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw FormatError(path.string() + ": " + what + " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9) {
      v = v * 10 + std::uint64_t(bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) fail(std::string("expected ") + what);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("missing P5 magic");
  pos = 2;
  const std::uint64_t w = number("width");
  const std::uint64_t h = number("height");
  const std::uint64_t maxval = number("maxval");
  if (w == 0 || h == 0) fail("zero image extent");
  if (maxval == 0 || maxval > 65535) fail("maxval " + std::to_string(maxval) + " outside 1..65535");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing whitespace after maxval");
  ++pos;
  const std::size_t depth = maxval < 256 ? 1 : 2;
  const std::size_t need = std::size_t(w * h) * depth;
  if (bytes.size() - pos < need) {
    fail("truncated payload: need " + std::to_string(need) + " bytes, have " + std::to_string(bytes.size() - pos));
  }
  Image img(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  const double scale = 1.0 / double(maxval);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    std::uint32_t q = static_cast<unsigned char>(bytes[pos + depth * i]);
    if (depth == 2) q = (q << 8) | static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
    if (q > maxval) {
      pos += depth * i;
      fail("sample " + std::to_string(q) + " exceeds maxval");
    }
    img.pixels[i] = double(q) * scale;
  }
  return img;
}

// ---- manifest -------------------------------------------------------------

namespace {

std::string manifest_header() {
  std::string h = "instance_id\tpath";
  for (auto name : kLandmarkNames) h += "\t" + std::string(name) + "_x\t" + std::string(name) + "_y";
  return h + "\tseed";
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

void build_manifest(const std::filesystem::path& dir, const std::vector<Phantom>& phantoms) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create '" + (dir / "images").string() + "': " + ec.message());
  std::ostringstream out;
  out << manifest_header() << "\n";
  for (const Phantom& p : phantoms) {
    if (p.instance_id.empty() || p.instance_id.find_first_of("\t\n/") != std::string::npos) {
      throw ParameterError("invalid instance id '" + p.instance_id + "'");
    }
    const std::string rel = "images/" + p.instance_id + ".pgm";
    write_pgm(dir / rel, p.image);
    out << p.instance_id << "\t" << rel;
    for (const Point& lm : p.landmarks) out << "\t" << format_double(lm.x) << "\t" << format_double(lm.y);
    out << "\t" << p.seed << "\n";
  }
  const auto path = dir / kManifestFile;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << out.str();
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

Manifest load_manifest(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / kManifestFile : path;
  std::ifstream f(file);
  if (!f) throw IoError("cannot open manifest '" + file.string() + "'");
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  if (!std::getline(f, line) || line != manifest_header()) {
    throw FormatError(file.string() + ": line 1: unexpected header");
  }
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = file.string() + ": line " + std::to_string(lineno);
    if (cols.size() != 3 + 2 * kLandmarkCount) {
      throw FormatError(where + ": expected " + std::to_string(3 + 2 * kLandmarkCount) + " fields, got " +
                        std::to_string(cols.size()));
    }
    ManifestRecord r;
    r.instance_id = cols[0];
    r.relative_path = cols[1];
    try {
      for (std::size_t i = 0; i < kLandmarkCount; ++i) {
        std::size_t used = 0;
        r.landmarks[i].x = std::stod(cols[2 + 2 * i], &used);
        if (used != cols[2 + 2 * i].size()) throw std::invalid_argument("x");
        r.landmarks[i].y = std::stod(cols[3 + 2 * i], &used);
        if (used != cols[3 + 2 * i].size()) throw std::invalid_argument("y");
      }
      std::size_t used = 0;
      r.seed = std::stoull(cols.back(), &used);
      if (used != cols.back().size()) throw std::invalid_argument("seed");
    } catch (const std::logic_error&) {
      throw FormatError(where + ": malformed number in record '" + r.instance_id + "'");
    }
    if (!std::filesystem::exists(m.root / r.relative_path)) {
      throw IoError("manifest record '" + r.instance_id + "' (" + where + "): image '" +
                    (m.root / r.relative_path).string() + "' is missing");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace ace
