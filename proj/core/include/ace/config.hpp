#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ace/cropgrid.hpp"
#include "ace/model.hpp"
#include "ace/synthgen.hpp"

namespace ace {

// Flat `key = value` settings. Lines starting with '#' and blank lines are
// ignored; a key may appear once. Readers consume keys through take_*(), and
// reject_unused() reports anything nobody asked for.
class Settings {
 public:
  static Settings parse(std::string_view text, const std::string& source = "<config>");
  static Settings load(const std::filesystem::path& path);

  // "key=value" from the command line; replaces an existing value.
  void apply_override(std::string_view assignment);
  void set(const std::string& key, std::string value);
  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::string take_string(const std::string& key, const std::string& fallback);
  double take_double(const std::string& key, double fallback);
  std::size_t take_size(const std::string& key, std::size_t fallback);
  std::uint64_t take_u64(const std::string& key, std::uint64_t fallback);
  bool take_bool(const std::string& key, bool fallback);

  std::vector<std::string> unused() const;
  // Throws ParameterError naming every unknown key.
  void reject_unused() const;

  // Sorted "key = value" lines; parse(render()) reproduces the settings.
  std::string render() const;
  void save(const std::filesystem::path& path) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::optional<std::string> take(const std::string& key);

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

// Shortest text that parses back to the same double.
std::string format_double(double v);

// Readers take their keys (with the given defaults) from `s`; writers store
// every field so the rendered snapshot is complete.
GridSpec read_grid(Settings& s, const GridSpec& defaults = GridSpec::desk_defaults());
void write_grid(Settings& s, const GridSpec& grid);

// token_side and input_side come from the grid.
EncoderConfig read_encoder(Settings& s, const GridSpec& grid, const EncoderConfig& defaults = {});
void write_encoder(Settings& s, const EncoderConfig& config);

PhantomSpec read_phantom(Settings& s, const PhantomSpec& defaults = {});
void write_phantom(Settings& s, const PhantomSpec& spec);

}  // namespace ace
