#include "ace/config.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <utility>

#include "ace/error.hpp"

namespace ace {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::pair<std::string, std::string> split_assignment(std::string_view line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw FormatError(where + ": expected 'key = value', got '" + std::string(line) + "'");
  const std::string_view key = trim(line.substr(0, eq));
  if (key.empty()) throw FormatError(where + ": empty key");
  return {std::string(key), std::string(trim(line.substr(eq + 1)))};
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) {
    throw ParameterError("setting '" + key + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

}  // namespace

std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw DomainError("format_double: conversion failed");
  return std::string(buf.data(), ptr);
}

Settings Settings::parse(std::string_view text, const std::string& source) {
  Settings s;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    auto [key, value] = split_assignment(line, where);
    if (s.contains(key)) throw FormatError(where + ": duplicate key '" + key + "'");
    s.values_.emplace(std::move(key), std::move(value));
  }
  return s;
}

Settings Settings::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path.string());
}

void Settings::apply_override(std::string_view assignment) {
  auto [key, value] = split_assignment(trim(assignment), "override");
  set(key, std::move(value));
}

void Settings::set(const std::string& key, std::string value) { values_[key] = std::move(value); }

std::optional<std::string> Settings::take(const std::string& key) {
  used_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Settings::take_string(const std::string& key, const std::string& fallback) {
  return take(key).value_or(fallback);
}

double Settings::take_double(const std::string& key, double fallback) {
  const auto v = take(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

std::size_t Settings::take_size(const std::string& key, std::size_t fallback) {
  const auto v = take(key);
  return v ? parse_number<std::size_t>(key, *v) : fallback;
}

std::uint64_t Settings::take_u64(const std::string& key, std::uint64_t fallback) {
  const auto v = take(key);
  return v ? parse_number<std::uint64_t>(key, *v) : fallback;
}

bool Settings::take_bool(const std::string& key, bool fallback) {
  const auto v = take(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "on" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "off" || *v == "no") return false;
  throw ParameterError("setting '" + key + "': expected a boolean, got '" + *v + "'");
}

std::vector<std::string> Settings::unused() const {
  std::vector<std::string> out;
  for (const auto& [key, value] : values_) {
    if (!used_.count(key)) out.push_back(key);
  }
  return out;
}

void Settings::reject_unused() const {
  const auto keys = unused();
  if (keys.empty()) return;
  std::string msg = "unknown setting";
  msg += keys.size() > 1 ? "s: " : ": ";
  for (std::size_t i = 0; i < keys.size(); ++i) msg += (i ? ", '" : "'") + keys[i] + "'";
  throw ParameterError(msg);
}

std::string Settings::render() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

void Settings::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << render();
  if (!out) throw IoError("write failed for " + path.string());
}

GridSpec read_grid(Settings& s, const GridSpec& d) {
  GridSpec g;
  g.grid_side = s.take_size("grid.grid_side", d.grid_side);
  g.patch_px = s.take_size("grid.patch_px", d.patch_px);
  g.c1 = s.take_size("grid.c1", d.c1);
  g.c2 = s.take_size("grid.c2", d.c2);
  g.token_side = s.take_size("grid.token_side", g.c1);
  g.resize_px = s.take_size("grid.resize_px", d.resize_px);
  g.validate();
  return g;
}

void write_grid(Settings& s, const GridSpec& g) {
  s.set("grid.grid_side", std::to_string(g.grid_side));
  s.set("grid.patch_px", std::to_string(g.patch_px));
  s.set("grid.c1", std::to_string(g.c1));
  s.set("grid.c2", std::to_string(g.c2));
  s.set("grid.token_side", std::to_string(g.token_side));
  s.set("grid.resize_px", std::to_string(g.resize_px));
}

EncoderConfig read_encoder(Settings& s, const GridSpec& grid, const EncoderConfig& d) {
  EncoderConfig c;
  c.embed_dim = s.take_size("model.embed_dim", d.embed_dim);
  c.depth = s.take_size("model.depth", d.depth);
  c.hidden = s.take_size("model.hidden", d.hidden);
  c.seed = s.take_u64("model.seed", d.seed);
  c.token_side = grid.token_side;
  c.input_side = grid.resize_px;
  c.validate();
  return c;
}

void write_encoder(Settings& s, const EncoderConfig& c) {
  s.set("model.embed_dim", std::to_string(c.embed_dim));
  s.set("model.depth", std::to_string(c.depth));
  s.set("model.hidden", std::to_string(c.hidden));
  s.set("model.seed", std::to_string(c.seed));
}

namespace {

using LayoutField = std::pair<const char*, double PhantomLayout::*>;
constexpr std::array<LayoutField, 29> kLayoutFields = {{
    {"body_cy", &PhantomLayout::body_cy},
    {"body_rx", &PhantomLayout::body_rx},
    {"body_ry", &PhantomLayout::body_ry},
    {"lobe_dx", &PhantomLayout::lobe_dx},
    {"lobe_cy", &PhantomLayout::lobe_cy},
    {"lobe_rx", &PhantomLayout::lobe_rx},
    {"lobe_ry", &PhantomLayout::lobe_ry},
    {"disc_cy", &PhantomLayout::disc_cy},
    {"disc_r", &PhantomLayout::disc_r},
    {"rib_top", &PhantomLayout::rib_top},
    {"rib_bottom", &PhantomLayout::rib_bottom},
    {"rib_half_width", &PhantomLayout::rib_half_width},
    {"rib_thickness", &PhantomLayout::rib_thickness},
    {"clav_medial_dx", &PhantomLayout::clav_medial_dx},
    {"clav_medial_y", &PhantomLayout::clav_medial_y},
    {"clav_lateral_dx", &PhantomLayout::clav_lateral_dx},
    {"clav_lateral_y", &PhantomLayout::clav_lateral_y},
    {"clav_sag", &PhantomLayout::clav_sag},
    {"clav_thickness", &PhantomLayout::clav_thickness},
    {"background", &PhantomLayout::background},
    {"tissue", &PhantomLayout::tissue},
    {"lobe", &PhantomLayout::lobe},
    {"disc", &PhantomLayout::disc},
    {"rib", &PhantomLayout::rib},
    {"clavicle", &PhantomLayout::clavicle},
    {"texture_amplitude", &PhantomLayout::texture_amplitude},
    {"texture_period", &PhantomLayout::texture_period},
    {"texture_angle", &PhantomLayout::texture_angle},
    {"detail_scale", &PhantomLayout::detail_scale},
}};

using JitterField = std::pair<const char*, double PhantomJitter::*>;
constexpr std::array<JitterField, 7> kJitterFields = {{
    {"translate", &PhantomJitter::translate},
    {"scale", &PhantomJitter::scale},
    {"intensity", &PhantomJitter::intensity},
    {"texture_angle", &PhantomJitter::texture_angle},
    {"texture_period", &PhantomJitter::texture_period},
    {"texture_phase", &PhantomJitter::texture_phase},
    {"detail", &PhantomJitter::detail},
}};

}  // namespace

PhantomSpec read_phantom(Settings& s, const PhantomSpec& d) {
  PhantomSpec p = d;
  p.side = s.take_size("phantom.side", d.side);
  p.intensity_noise = s.take_double("phantom.intensity_noise", d.intensity_noise);
  p.layout.ribs = s.take_size("phantom.layout.ribs", d.layout.ribs);
  p.layout.edge_px = s.take_double("phantom.layout.edge_px", d.layout.edge_px);
  for (const auto& [name, member] : kLayoutFields) {
    p.layout.*member = s.take_double(std::string("phantom.layout.") + name, d.layout.*member);
  }
  for (const auto& [name, member] : kJitterFields) {
    p.jitter.*member = s.take_double(std::string("phantom.jitter.") + name, d.jitter.*member);
  }
  p.validate();
  return p;
}

void write_phantom(Settings& s, const PhantomSpec& p) {
  s.set("phantom.side", std::to_string(p.side));
  s.set("phantom.intensity_noise", format_double(p.intensity_noise));
  s.set("phantom.layout.ribs", std::to_string(p.layout.ribs));
  s.set("phantom.layout.edge_px", format_double(p.layout.edge_px));
  for (const auto& [name, member] : kLayoutFields) s.set(std::string("phantom.layout.") + name, format_double(p.layout.*member));
  for (const auto& [name, member] : kJitterFields) s.set(std::string("phantom.jitter.") + name, format_double(p.jitter.*member));
}

}  // namespace ace
