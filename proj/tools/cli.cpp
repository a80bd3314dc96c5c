#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>

#include "ace/config.hpp"
#include "ace/cropgrid.hpp"
#include "ace/error.hpp"
#include "ace/log.hpp"
#include "ace/probes.hpp"
#include "ace/synthgen.hpp"
#include "ace/trainer.hpp"
#include "ace/verify.hpp"

namespace ace::cli {

namespace fs = std::filesystem;

namespace {

// Options every subcommand shares. Precedence: config file, then key=value
// overrides, then dedicated flags.
struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
};

void add_common(CLI::App& cmd, Common& c, bool out_required, bool threaded) {
  cmd.add_option("--config", c.config, "settings file (key = value lines)")->check(CLI::ExistingFile);
  auto* out = cmd.add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  cmd.add_option("--seed", c.seed, "master seed");
  if (threaded) cmd.add_option("--threads", c.threads, "worker threads (1 is bit-deterministic)")->check(CLI::PositiveNumber);
  cmd.add_option("overrides", c.overrides, "key=value settings overrides");
}

Settings resolve(const Common& c) {
  Settings s = c.config.empty() ? Settings{} : Settings::load(c.config);
  for (const std::string& o : c.overrides) s.apply_override(o);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  if (c.threads) s.set("threads", std::to_string(*c.threads));
  return s;
}

std::string absolute(const std::string& path) { return path.empty() ? path : fs::absolute(path).lexically_normal().string(); }

void snapshot(const Settings& resolved, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  resolved.save(dir / (name + ".cfg"));
}

// ---- gen-data --------------------------------------------------------------

int gen_data(const Common& c) {
  Settings s = resolve(c);
  const std::uint64_t seed = s.take_u64("seed", 0);
  const std::size_t count = s.take_size("gen.count", 512);
  const PhantomSpec spec = read_phantom(s);
  s.reject_unused();
  spec.validate();

  build_manifest(c.out, generate_set(seed, count, spec));
  Settings r;
  r.set("seed", std::to_string(seed));
  r.set("gen.count", std::to_string(count));
  write_phantom(r, spec);
  snapshot(r, c.out, "gen-data");
  log::info("wrote " + std::to_string(count) + " phantoms to " + c.out);
  return kExitOk;
}

// ---- pretrain ----------------------------------------------------------------

struct PretrainFlags {
  std::string manifest;
  bool resume = false;
  std::optional<std::size_t> stop_after;
};

int pretrain(const Common& c, const PretrainFlags& f) {
  Settings s = resolve(c);
  if (!f.manifest.empty()) s.set("manifest", f.manifest);
  if (s.contains("manifest")) s.set("manifest", absolute(s.take_string("manifest", "")));
  TrainConfig config = TrainConfig::from_settings(s);
  s.reject_unused();
  if (config.manifest.empty()) throw ParameterError("pretrain needs --manifest or a 'manifest' setting");

  const fs::path out = c.out;
  Settings r;
  config.write(r);
  const fs::path snap = out / "pretrain.cfg";
  if (f.resume && fs::exists(snap) && Settings::load(snap).render() != r.render()) {
    throw ParameterError("resolved settings differ from the run being resumed in " + out.string());
  }
  snapshot(r, out, "pretrain");
  if (!fs::exists(out / "init.ace")) save_training_checkpoint(out / "init.ace", make_trainer_state(config), config);

  const TrainResult result = train_loop(config, {out, f.resume, f.stop_after});
  const std::size_t step = result.state.model.step;
  log::info(std::string(result.completed ? "finished" : "stopped") + " at step " + std::to_string(step));
  return kExitOk;
}

// ---- probe -------------------------------------------------------------------

const std::vector<std::string> kProbeNames = {"compositionality", "decompositionality", "retrieval", "correspondence",
                                              "symmetry",         "separability",       "embeddings"};

struct ProbeFlags {
  std::string name;
  std::string ckpt;
  std::string manifest;
};

int probe(const Common& c, const ProbeFlags& f) {
  Settings s = resolve(c);
  if (!f.ckpt.empty()) s.set("ckpt", f.ckpt);
  if (!f.manifest.empty()) s.set("manifest", f.manifest);
  const std::string ckpt = absolute(s.take_string("ckpt", ""));
  const std::string manifest = absolute(s.take_string("manifest", ""));
  const ProbeConfig config = ProbeConfig::from_settings(s);
  s.reject_unused();
  if (ckpt.empty()) throw ParameterError("probe needs --ckpt or a 'ckpt' setting");
  if (manifest.empty()) throw ParameterError("probe needs --manifest or a 'manifest' setting");

  const EncoderState state = state_from_checkpoint(read_checkpoint(ckpt));
  const std::vector<LabeledImage> images = load_labeled_images(load_manifest(manifest));

  Settings r;
  config.write(r);
  r.set("ckpt", ckpt);
  r.set("manifest", manifest);
  snapshot(r, c.out, f.name);

  if (f.name == "embeddings") {
    const auto embeddings = landmark_embeddings(state, images, config);
    write_embeddings_csv(fs::path(c.out) / "embeddings.csv", embeddings);
    log::info("wrote " + std::to_string(embeddings.size()) + " landmark embeddings");
    return kExitOk;
  }
  using ProbeFn = ProbeReport (*)(const EncoderState&, std::span<const LabeledImage>, const ProbeConfig&);
  const std::map<std::string, ProbeFn> probes = {
      {"compositionality", compositionality_probe}, {"decompositionality", decompositionality_probe},
      {"retrieval", retrieval_probe},               {"correspondence", correspondence_probe},
      {"symmetry", symmetry_probe},                 {"separability", landmark_separability},
  };
  const ProbeReport report = probes.at(f.name)(state, images, config);
  report.write_csv(c.out);
  for (const auto& [key, value] : report.summary) log::info(f.name + " " + key + " = " + format_double(value));
  for (const std::string& flag : report.flags) log::warn(f.name + ": " + flag);
  return kExitOk;
}

// ---- gradcheck -----------------------------------------------------------------

struct GradcheckFlags {
  std::optional<std::size_t> seeds;
  std::optional<double> tolerance;
};

int gradcheck(const Common& c, const GradcheckFlags& f, std::ostream& out) {
  Settings s = resolve(c);
  if (f.seeds) s.set("gradcheck.seeds", std::to_string(*f.seeds));
  if (f.tolerance) s.set("gradcheck.tolerance", format_double(*f.tolerance));
  const std::uint64_t seed = s.take_u64("seed", 0);
  const std::size_t seeds = s.take_size("gradcheck.seeds", 100);
  const double tolerance = s.take_double("gradcheck.tolerance", 1e-4);
  s.reject_unused();
  if (seeds == 0) throw ParameterError("gradcheck.seeds must be positive");
  if (!(tolerance > 0)) throw ParameterError("gradcheck.tolerance must be positive");

  const GradCheckReport report = gradcheck_suite(seeds, seed);
  for (const GradCheckCase& gc : report.cases) out << gc.name << ' ' << format_double(gc.worst) << '\n';
  const bool pass = report.worst() < tolerance;
  out << "gradcheck: " << (pass ? "pass" : "FAIL") << " (max relative error " << format_double(report.worst())
      << " over " << seeds << " seeds, tolerance " << format_double(tolerance) << ")\n";

  if (!c.out.empty()) {
    Settings r;
    r.set("seed", std::to_string(seed));
    r.set("gradcheck.seeds", std::to_string(seeds));
    r.set("gradcheck.tolerance", format_double(tolerance));
    snapshot(r, c.out, "gradcheck");
    std::ofstream csv(fs::path(c.out) / "gradcheck.csv");
    csv << "case,max_relative_error\n";
    for (const GradCheckCase& gc : report.cases) csv << gc.name << ',' << format_double(gc.worst) << '\n';
    if (!csv) throw IoError("cannot write " + (fs::path(c.out) / "gradcheck.csv").string());
  }
  return pass ? kExitOk : kExitError;
}

// ---- geom-verify -----------------------------------------------------------------

struct GeomFlags {
  std::optional<std::size_t> samples;
  std::string grid;
  bool corrupt_parity = false;
};

int geom_verify(const Common& c, const GeomFlags& f, std::ostream& out, std::ostream& err) {
  Settings s = resolve(c);
  if (f.samples) s.set("geom.samples", std::to_string(*f.samples));
  if (!f.grid.empty()) s.set("geom.grid", f.grid);
  if (f.corrupt_parity) s.set("geom.corrupt_parity", "true");
  const std::uint64_t seed = s.take_u64("seed", 0);
  const std::size_t samples = s.take_size("geom.samples", 1000);
  const std::string which = s.take_string("geom.grid", "both");
  const bool corrupt = s.take_bool("geom.corrupt_parity", false);

  std::vector<std::pair<std::string, GridSpec>> grids;
  if (which == "both") {
    // grid.* overrides apply to each preset.
    Settings paper = s;
    grids.emplace_back("paper", read_grid(paper, GridSpec::paper_defaults()));
    grids.emplace_back("desk", read_grid(s, GridSpec::desk_defaults()));
  } else if (which == "paper" || which == "desk") {
    grids.emplace_back(which, read_grid(s, which == "paper" ? GridSpec::paper_defaults() : GridSpec::desk_defaults()));
  } else {
    throw ParameterError("geom.grid must be paper, desk or both, got '" + which + "'");
  }
  s.reject_unused();

  bool pass = true;
  for (const auto& [name, grid] : grids) {
    const GeometryCheck check = verify_geometry(grid, samples, seed, corrupt);
    for (const std::string& line : check.failures) err << name << ": " << line << '\n';
    out << "geom-verify " << name << ": " << (check.passed() ? "pass" : "FAIL") << " (" << check.samples
        << " samples, " << check.mismatches << " mismatches)\n";
    pass = pass && check.passed();
  }

  if (!c.out.empty()) {
    Settings r;
    r.set("seed", std::to_string(seed));
    r.set("geom.samples", std::to_string(samples));
    r.set("geom.grid", which);
    r.set("geom.corrupt_parity", corrupt ? "true" : "false");
    if (grids.size() == 1) write_grid(r, grids.front().second);
    snapshot(r, c.out, "geom-verify");
  }
  return pass ? kExitOk : kExitError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"grid-wise crop pretraining, probes and verification", "ace"};
  app.set_version_flag("--version", "0.1.0");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  PretrainFlags pf;
  ProbeFlags prf;
  GradcheckFlags gf;
  GeomFlags geo;

  auto* gen = app.add_subcommand("gen-data", "generate phantoms, PGM files and a manifest");
  add_common(*gen, common, true, false);

  auto* pre = app.add_subcommand("pretrain", "train an encoder on a manifest");
  add_common(*pre, common, true, true);
  pre->add_option("--manifest", pf.manifest, "manifest file or directory");
  pre->add_flag("--resume", pf.resume, "continue from <out>/last.ace");
  pre->add_option("--stop-after", pf.stop_after, "stop once this many steps are done");

  auto* prb = app.add_subcommand("probe", "evaluate a frozen checkpoint");
  prb->add_option("name", prf.name, "probe name")->required()->check(CLI::IsMember(kProbeNames));
  add_common(*prb, common, true, true);
  prb->add_option("--ckpt", prf.ckpt, "checkpoint file");
  prb->add_option("--manifest", prf.manifest, "manifest file or directory");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and the total loss");
  add_common(*grad, common, false, false);
  grad->add_option("--seeds", gf.seeds, "random draws per case");
  grad->add_option("--tolerance", gf.tolerance, "maximum relative error");

  auto* geom = app.add_subcommand("geom-verify", "check crop overlaps against a pixel-intersection oracle");
  add_common(*geom, common, false, false);
  geom->add_option("--samples", geo.samples, "crop pairs per grid");
  geom->add_option("--grid", geo.grid, "paper, desk or both")->check(CLI::IsMember({"paper", "desk", "both"}));
  geom->add_flag("--corrupt-parity", geo.corrupt_parity, "test hook: shift C1 by one patch");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    log::configure_from_env();
    if (gen->parsed()) return gen_data(common);
    if (pre->parsed()) return pretrain(common, pf);
    if (prb->parsed()) return probe(common, prf);
    if (grad->parsed()) return gradcheck(common, gf, out);
    return geom_verify(common, geo, out, err);
  } catch (const std::exception& e) {
    err << "ace: error: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace ace::cli
