#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"

namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result ace(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = ace::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("ace_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

// 32 px images on an 8x8 grid of 4 px patches; T = 4 tokens per side.
const std::vector<std::string> kTinyRun = {
    "grid.grid_side=8", "grid.patch_px=4", "grid.c1=4",     "grid.c2=8",       "grid.resize_px=16",
    "model.embed_dim=8", "model.depth=1",  "model.hidden=8", "train.epochs=2", "train.batch_size=2",
    "train.warmup_epochs=1"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST(Cli, UsageErrorsExitTwoWithHelp) {
  const Result bogus = ace({"geom-verify", "--bogus"});
  EXPECT_EQ(bogus.code, ace::cli::kExitUsage);
  EXPECT_NE(bogus.err.find("Usage"), std::string::npos) << bogus.err;
  EXPECT_EQ(ace({}).code, ace::cli::kExitUsage);
  EXPECT_EQ(ace({"train"}).code, ace::cli::kExitUsage);
  EXPECT_EQ(ace({"probe", "nonsense", "--out", "x"}).code, ace::cli::kExitUsage);
  EXPECT_EQ(ace({"gen-data"}).code, ace::cli::kExitUsage);  // --out is required
  EXPECT_EQ(ace({"geom-verify", "--samples", "many"}).code, ace::cli::kExitUsage);
}

TEST(Cli, HelpExitsZero) {
  const Result help = ace({"--help"});
  EXPECT_EQ(help.code, ace::cli::kExitOk);
  EXPECT_NE(help.out.find("geom-verify"), std::string::npos);
}

TEST(Cli, GenDataWritesManifestImagesAndSnapshot) {
  TempDir dir("gen");
  const Result r = ace({"gen-data", "--out", dir / "d", "--seed", "4", "gen.count=3", "phantom.side=48"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_TRUE(fs::exists(dir / "d/manifest.tsv"));
  EXPECT_TRUE(fs::exists(dir / "d/images/phantom_00002.pgm"));
  const std::string snap = slurp(dir / "d/gen-data.cfg");
  EXPECT_NE(snap.find("seed = 4"), std::string::npos);
  EXPECT_NE(snap.find("phantom.side = 48"), std::string::npos);

  // The snapshot alone reproduces every artifact.
  ASSERT_EQ(ace({"gen-data", "--config", dir / "d/gen-data.cfg", "--out", dir / "e"}).code, 0);
  EXPECT_EQ(slurp(dir / "d/manifest.tsv"), slurp(dir / "e/manifest.tsv"));
  EXPECT_EQ(slurp(dir / "d/images/phantom_00001.pgm"), slurp(dir / "e/images/phantom_00001.pgm"));
  EXPECT_EQ(snap, slurp(dir / "e/gen-data.cfg"));
}

TEST(Cli, EmptySetGivesHeaderOnlyManifest) {
  TempDir dir("empty");
  ASSERT_EQ(ace({"gen-data", "--out", dir / "d", "gen.count=0"}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "d/manifest.tsv"));
  EXPECT_FALSE(fs::exists(dir / "d/images/phantom_00000.pgm"));
}

TEST(Cli, ValidationErrorsExitOne) {
  TempDir dir("invalid");
  const Result typo = ace({"gen-data", "--out", dir / "d", "phantom.sidee=48"});
  EXPECT_EQ(typo.code, ace::cli::kExitError);
  EXPECT_NE(typo.err.find("phantom.sidee"), std::string::npos) << typo.err;
  EXPECT_EQ(ace({"gen-data", "--out", dir / "d", "notakeyvalue"}).code, ace::cli::kExitError);
  EXPECT_EQ(ace({"gen-data", "--out", dir / "d", "phantom.side=-1"}).code, ace::cli::kExitError);
  EXPECT_EQ(ace({"pretrain", "--out", dir / "r"}).code, ace::cli::kExitError);  // no manifest
}

TEST(Cli, MissingCheckpointNamesThePath) {
  TempDir dir("missing");
  ASSERT_EQ(ace({"gen-data", "--out", dir / "d", "gen.count=2", "phantom.side=32"}).code, 0);
  const Result r = ace({"probe", "retrieval", "--ckpt", dir / "x.ace", "--manifest", dir / "d/manifest.tsv", "--out",
                        dir / "p"});
  EXPECT_EQ(r.code, ace::cli::kExitError);
  EXPECT_NE(r.err.find(dir / "x.ace"), std::string::npos) << r.err;
}

TEST(Cli, GeomVerifyPassesAndCatchesCorruptParity) {
  const Result ok = ace({"geom-verify", "--samples", "200"});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("geom-verify paper: pass"), std::string::npos) << ok.out;
  EXPECT_NE(ok.out.find("geom-verify desk: pass"), std::string::npos) << ok.out;

  const Result bad = ace({"geom-verify", "--samples", "5", "--grid", "desk", "--corrupt-parity"});
  EXPECT_EQ(bad.code, ace::cli::kExitError);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_NE(bad.err.find("C1 at ("), std::string::npos) << bad.err;

  EXPECT_EQ(ace({"geom-verify", "--grid", "desk", "grid.c1=16", "grid.c2=16"}).code, ace::cli::kExitError);
}

TEST(Cli, GeomVerifySnapshotWhenOutGiven) {
  TempDir dir("geom");
  ASSERT_EQ(ace({"geom-verify", "--samples", "10", "--grid", "paper", "--out", dir / "g"}).code, 0);
  const std::string snap = slurp(dir / "g/geom-verify.cfg");
  EXPECT_NE(snap.find("grid.c1 = 14"), std::string::npos) << snap;
  EXPECT_EQ(ace({"geom-verify", "--config", dir / "g/geom-verify.cfg"}).code, 0);
}

TEST(Cli, GradcheckReportsEveryCase) {
  TempDir dir("grad");
  const Result r = ace({"gradcheck", "--seeds", "1", "--out", dir / "g"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("total_loss"), std::string::npos);
  EXPECT_NE(r.out.find("gradcheck: pass"), std::string::npos);
  EXPECT_NE(slurp(dir / "g/gradcheck.csv").find("matmul,"), std::string::npos);
  EXPECT_EQ(ace({"gradcheck", "--seeds", "1", "--tolerance", "1e-300"}).code, ace::cli::kExitError);
}

TEST(Cli, PretrainThenProbe) {
  TempDir dir("run");
  ASSERT_EQ(ace({"gen-data", "--out", dir / "d", "gen.count=4", "phantom.side=32"}).code, 0);
  const Result train = ace(concat({"pretrain", "--manifest", dir / "d", "--out", dir / "r"}, kTinyRun));
  ASSERT_EQ(train.code, 0) << train.err;
  for (const char* f : {"pretrain.cfg", "init.ace", "final.ace", "metrics.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir.path / "r" / f)) << f;
  }

  // Re-running from the snapshot reproduces the metrics stream.
  ASSERT_EQ(ace({"pretrain", "--config", dir / "r/pretrain.cfg", "--out", dir / "r2"}).code, 0);
  EXPECT_EQ(slurp(dir / "r/metrics.jsonl"), slurp(dir / "r2/metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "r/final.ace"), slurp(dir / "r2/final.ace"));

  // Resuming under different settings is refused.
  const Result clash =
      ace(concat({"pretrain", "--manifest", dir / "d", "--out", dir / "r", "--resume", "train.base_lr=0.1"}, kTinyRun));
  EXPECT_EQ(clash.code, ace::cli::kExitError);

  const Result probe = ace({"probe", "separability", "--ckpt", dir / "r/final.ace", "--manifest", dir / "d", "--out",
                            dir / "p", "--threads", "2"});
  ASSERT_EQ(probe.code, 0) << probe.err;
  EXPECT_TRUE(fs::exists(dir / "p/separability.csv"));
  EXPECT_TRUE(fs::exists(dir / "p/separability.cfg"));
  ASSERT_EQ(ace({"probe", "separability", "--config", dir / "p/separability.cfg", "--out", dir / "q"}).code, 0);
  EXPECT_EQ(slurp(dir / "p/separability_summary.csv"), slurp(dir / "q/separability_summary.csv"));

  ASSERT_EQ(ace({"probe", "embeddings", "--ckpt", dir / "r/init.ace", "--manifest", dir / "d", "--out", dir / "e"}).code,
            0);
  EXPECT_TRUE(fs::exists(dir / "e/embeddings.csv"));
}

TEST(Cli, BadLogLevelExitsOne) {
  ::setenv("ACE_LOG", "loud", 1);
  const Result r = ace({"geom-verify", "--samples", "1"});
  ::unsetenv("ACE_LOG");
  EXPECT_EQ(r.code, ace::cli::kExitError);
  EXPECT_NE(r.err.find("ACE_LOG"), std::string::npos) << r.err;
}

}  // namespace
