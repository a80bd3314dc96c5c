#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "ace/error.hpp"
#include "ace/model.hpp"
#include "ace/numerics/grad_check.hpp"
#include "ace/numerics/ops.hpp"

namespace {

using ace::EncoderConfig;
using ace::Image;
using ace::ParamSet;
using ace::Tensor;
namespace num = ace::num;

EncoderConfig small_config(std::size_t depth = 1) {
  EncoderConfig c;
  c.embed_dim = 8;
  c.token_side = 4;
  c.input_side = 8;
  c.depth = depth;
  c.hidden = 6;
  c.seed = 3;
  return c;
}

Image random_image(std::mt19937_64& rng, std::size_t side) {
  std::uniform_real_distribution<double> u(0, 1);
  Image img = Image::square(side);
  for (double& v : img.pixels) v = u(rng);
  return img;
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.input_side = 10;
  EXPECT_THROW(c.validate(), ace::ParameterError);
  c = small_config();
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), ace::ParameterError);
}

TEST(Init, DeterministicAndTeacherMatchesStudent) {
  const auto a = ace::init(small_config());
  const auto b = ace::init(small_config());
  EXPECT_TRUE(a.student.equals(b.student));
  EXPECT_TRUE(a.student.equals(a.teacher));
  EXPECT_EQ(a.step, 0u);
  EXPECT_EQ(a.center, std::vector<double>(8, 0.0));
  for (const auto& [name, t] : a.teacher.entries()) EXPECT_FALSE(t.requires_grad()) << name;
  for (const auto& [name, t] : a.student.entries()) EXPECT_TRUE(t.requires_grad()) << name;
  // Copies, not aliases.
  EXPECT_FALSE(a.student.get("embed.w").same_node(a.teacher.get("embed.w")));
}

TEST(Init, DifferentSeedsDiffer) {
  EncoderConfig c = small_config();
  const auto a = ace::init(c);
  c.seed = 4;
  EXPECT_FALSE(a.student.equals(ace::init(c).student));
}

TEST(Encode, OutputScaleTracksInput) {
  EncoderConfig c;
  c.depth = 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    c.seed = seed;
    const auto st = ace::init(c);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> g(0.5, 0.2);
    Image img = Image::square(c.input_side);
    for (double& v : img.pixels) v = g(rng);
    const Tensor y = ace::encode(st.student, c, img);
    auto stdev = [](std::span<const double> v) {
      double m = 0, s = 0;
      for (double x : v) m += x;
      m /= double(v.size());
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / double(v.size()));
    };
    const double ratio = stdev(y.values()) / stdev(img.pixels);
    EXPECT_GE(ratio, 0.1) << seed;
    EXPECT_LE(ratio, 10.0) << seed;
  }
}

TEST(Encode, WrongSideIsShapeError) {
  const auto st = ace::init(small_config());
  EXPECT_THROW(ace::encode(st.student, small_config(), Image::square(9)), ace::DimensionError);
}

TEST(Encode, DepthZeroIsPatchLocal) {
  const EncoderConfig c = small_config(0);
  const auto st = ace::init(c);
  std::mt19937_64 rng(1);
  const Image base = random_image(rng, c.input_side);
  const Tensor y0 = ace::encode(st.student, c, base);
  const std::size_t ps = c.patch_side();
  for (std::size_t r = 0; r < c.token_side; ++r) {
    for (std::size_t col = 0; col < c.token_side; ++col) {
      Image img = base;
      img.at(col * ps + 1, r * ps) += 0.25;
      const Tensor y = ace::encode(st.student, c, img);
      for (std::size_t tok = 0; tok < c.tokens(); ++tok) {
        bool same = true;
        for (std::size_t k = 0; k < c.embed_dim; ++k) same = same && y.at(tok, k) == y0.at(tok, k);
        EXPECT_EQ(same, tok != r * c.token_side + col);
      }
    }
  }
}

TEST(Encode, DepthPositiveMixesTokens) {
  const EncoderConfig c = small_config(1);
  const auto st = ace::init(c);
  std::mt19937_64 rng(1);
  const Image base = random_image(rng, c.input_side);
  Image img = base;
  img.at(0, 0) += 0.25;
  const Tensor a = ace::encode(st.student, c, base);
  const Tensor b = ace::encode(st.student, c, img);
  EXPECT_NE(a.at(c.tokens() - 1, 0), b.at(c.tokens() - 1, 0));
}

TEST(Encode, ConstantImageGivesIdenticalTokensAtDepthZero) {
  const EncoderConfig c = small_config(0);
  const auto st = ace::init(c);
  const Tensor y = ace::encode(st.student, c, Image::square(c.input_side, 0.3));
  for (std::size_t tok = 1; tok < c.tokens(); ++tok) {
    for (std::size_t k = 0; k < c.embed_dim; ++k) EXPECT_EQ(y.at(tok, k), y.at(0, k));
  }
}

// Scalar loss over the student parameters through encode and both heads.
double full_path_check(const EncoderConfig& c, std::uint64_t seed) {
  const auto st = ace::init(c);
  std::mt19937_64 rng(seed);
  const Image img = random_image(rng, c.input_side);
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& [name, t] : st.student.entries()) {
    inputs.push_back(t.detach());
    names.push_back(name);
  }
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> probe(c.tokens() * c.embed_dim);
  for (double& v : probe) v = u(rng);
  const Tensor w({c.tokens() / 4, c.embed_dim}, std::vector<double>(probe.begin(), probe.begin() + c.tokens() / 4 * c.embed_dim));
  std::vector<double> probe4(4 * c.tokens() * c.embed_dim);
  for (double& v : probe4) v = u(rng);
  const Tensor w4({4 * c.tokens(), c.embed_dim}, probe4);
  const Tensor wt({c.tokens(), c.embed_dim}, probe);

  const num::ScalarFn<double> f = [&](const std::vector<Tensor>& in) {
    ParamSet p;
    for (std::size_t i = 0; i < in.size(); ++i) p.add(names[i], in[i]);
    const Tensor y = ace::encode(p, c, img);
    const Tensor comp = ace::compose_head(p, c, y);
    const Tensor dec = ace::decompose_head(p, c, y);
    return num::add(num::add(num::sum(num::mul(num::gelu(comp), w)), num::sum(num::mul(dec, w4))),
                    num::sum(num::mul(y, wt)));
  };
  return num::grad_check(f, inputs, 1e-6);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EncoderConfig c = small_config(2);
    c.seed = seed;
    EXPECT_LT(full_path_check(c, seed), 1e-4) << seed;
  }
}

TEST(ComposeHead, ShapeAndBlockLocality) {
  const EncoderConfig c = small_config();
  const auto st = ace::init(c);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(c.tokens() * c.embed_dim);
  for (double& x : v) x = u(rng);
  const Tensor tokens({c.tokens(), c.embed_dim}, v);
  const Tensor out = ace::compose_head(st.student, c, tokens);
  ASSERT_EQ(out.shape(), (num::Shape{4, 8}));

  // Swap 2×2 block (0,0) with block (1,1) of the 4×4 grid.
  std::vector<double> swapped = v;
  const std::size_t t = c.token_side, k = c.embed_dim;
  for (std::size_t dr = 0; dr < 2; ++dr) {
    for (std::size_t dc = 0; dc < 2; ++dc) {
      const std::size_t a = dr * t + dc, b = (2 + dr) * t + 2 + dc;
      for (std::size_t j = 0; j < k; ++j) std::swap(swapped[a * k + j], swapped[b * k + j]);
    }
  }
  const Tensor out2 = ace::compose_head(st.student, c, Tensor({c.tokens(), k}, swapped));
  for (std::size_t j = 0; j < k; ++j) {
    EXPECT_EQ(out2.at(0, j), out.at(3, j));
    EXPECT_EQ(out2.at(3, j), out.at(0, j));
    EXPECT_EQ(out2.at(1, j), out.at(1, j));
  }
}

TEST(ComposeHead, ConstructedSumWeights) {
  // GELU(x) = x for large positive x is not exact, so route through a shift:
  // w1 = identity, b1 = +s, w2 = stacked identity, b2 = -4s. With s large
  // GELU is the identity to double precision on inputs in [-1, 1].
  EncoderConfig c = small_config();
  auto st = ace::init(c);
  const std::size_t k = c.embed_dim;
  const double s = 40.0;
  std::vector<double> w1(16 * k * k, 0.0), b1(4 * k, s), w2(4 * k * k, 0.0), b2(k, -4 * s);
  for (std::size_t i = 0; i < 4 * k; ++i) w1[i * 4 * k + i] = 1.0;
  for (std::size_t i = 0; i < 4 * k; ++i) w2[i * k + i % k] = 1.0;
  ParamSet& p = st.student;
  p.get("compose.w1") = Tensor({4 * k, 4 * k}, w1);
  p.get("compose.b1") = Tensor({4 * k}, b1);
  p.get("compose.w2") = Tensor({4 * k, k}, w2);
  p.get("compose.b2") = Tensor({k}, b2);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(c.tokens() * k);
  for (double& x : v) x = u(rng);
  const Tensor out = ace::compose_head(p, c, Tensor({c.tokens(), k}, v));
  const std::size_t t = c.token_side;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t col = 0; col < 2; ++col) {
      for (std::size_t j = 0; j < k; ++j) {
        double want = 0;
        for (std::size_t dr = 0; dr < 2; ++dr) {
          for (std::size_t dc = 0; dc < 2; ++dc) want += v[((2 * r + dr) * t + 2 * col + dc) * k + j];
        }
        EXPECT_NEAR(out.at(r * 2 + col, j), want, 1e-12);
      }
    }
  }
}

TEST(ComposeHead, RejectsOddSideAndBadShape) {
  EncoderConfig c = small_config();
  const auto st = ace::init(c);
  EXPECT_THROW(ace::compose_head(st.student, c, Tensor::zeros({15, 8})), ace::DimensionError);
  c.token_side = 3;
  c.input_side = 9;
  EXPECT_THROW(ace::compose_head(st.student, c, Tensor::zeros({9, 8})), ace::DimensionError);
}

TEST(DecomposeHead, ShapeAndLocality) {
  const EncoderConfig c = small_config();
  const auto st = ace::init(c);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(c.tokens() * c.embed_dim);
  for (double& x : v) x = u(rng);
  const Tensor base = ace::decompose_head(st.student, c, Tensor({c.tokens(), c.embed_dim}, v));
  ASSERT_EQ(base.shape(), (num::Shape{64, 8}));
  const std::size_t t = c.token_side, side = 2 * t;
  const std::size_t r = 1, col = 2;
  v[(r * t + col) * c.embed_dim + 3] += 0.5;
  const Tensor moved = ace::decompose_head(st.student, c, Tensor({c.tokens(), c.embed_dim}, v));
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const bool inside = i / 2 == r && j / 2 == col;
      bool same = true;
      for (std::size_t k = 0; k < c.embed_dim; ++k) same = same && moved.at(i * side + j, k) == base.at(i * side + j, k);
      EXPECT_EQ(same, !inside) << i << "," << j;
    }
  }
}

TEST(DecomposeHead, IdentityBlockWeightsGiveEqualSubEmbeddings) {
  const EncoderConfig c = small_config();
  auto st = ace::init(c);
  const std::size_t k = c.embed_dim;
  // w2 maps every hidden chunk onto all four output chunks identically.
  std::vector<double> w2(16 * k * k, 0.0);
  for (std::size_t i = 0; i < 4 * k; ++i) {
    for (std::size_t sub = 0; sub < 4; ++sub) w2[i * 4 * k + sub * k + i % k] = 1.0;
  }
  st.student.get("decompose.w2") = Tensor({4 * k, 4 * k}, w2);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(c.tokens() * k);
  for (double& x : v) x = u(rng);
  const Tensor out = ace::decompose_head(st.student, c, Tensor({c.tokens(), k}, v));
  const std::size_t side = 2 * c.token_side;
  for (std::size_t i = 0; i < side; i += 2) {
    for (std::size_t j = 0; j < side; j += 2) {
      for (std::size_t q = 0; q < k; ++q) {
        const double tl = out.at(i * side + j, q);
        EXPECT_EQ(out.at(i * side + j + 1, q), tl);
        EXPECT_EQ(out.at((i + 1) * side + j, q), tl);
        EXPECT_EQ(out.at((i + 1) * side + j + 1, q), tl);
      }
    }
  }
}

TEST(Heads, ShapeInverse) {
  const EncoderConfig c = small_config();
  const auto st = ace::init(c);
  const Tensor tokens = Tensor::full({c.tokens(), c.embed_dim}, 0.1);
  const Tensor dec = ace::decompose_head(st.student, c, tokens);
  EncoderConfig wide = c;
  wide.token_side = 2 * c.token_side;
  wide.input_side = 2 * c.input_side;
  EXPECT_EQ(ace::compose_head(st.student, wide, dec).shape(), tokens.shape());
  const Tensor comp = ace::compose_head(st.student, c, tokens);
  EncoderConfig narrow = c;
  narrow.token_side = c.token_side / 2;
  narrow.input_side = c.input_side / 2;
  EXPECT_EQ(ace::decompose_head(st.student, narrow, comp).shape(), tokens.shape());
}

TEST(Ema, LambdaSchedule) {
  EXPECT_EQ(ace::ema_lambda(0, 100), 0.996);
  EXPECT_EQ(ace::ema_lambda(100, 100), 1.0);
  EXPECT_NEAR(ace::ema_lambda(50, 100), 0.998, 1e-15);
  double prev = 0;
  for (std::size_t s = 0; s <= 100; ++s) {
    const double l = ace::ema_lambda(s, 100);
    EXPECT_GE(l, prev);
    EXPECT_GE(l, 0.996);
    EXPECT_LE(l, 1.0);
    prev = l;
  }
  EXPECT_THROW(ace::ema_lambda(101, 100), ace::ParameterError);
  EXPECT_THROW(ace::ema_lambda(0, 0), ace::ParameterError);
}

TEST(Ema, UpdateArithmetic) {
  auto st = ace::init(small_config());
  const ParamSet before = st.teacher.clone(false);
  ace::ema_update(st, 1.0);
  EXPECT_TRUE(st.teacher.equals(before));
  ace::ema_update(st, 0.0);
  EXPECT_TRUE(st.teacher.equals(st.student));

  for (auto& [n, t] : st.teacher.entries()) std::fill(t.mutable_values().begin(), t.mutable_values().end(), 1.0);
  for (auto& [n, t] : st.student.entries()) std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  ace::ema_update(st, 0.996);
  for (const auto& [n, t] : st.teacher.entries()) {
    for (double v : t.values()) EXPECT_EQ(v, 0.996);
  }
  EXPECT_THROW(ace::ema_update(st, 1.5), ace::ParameterError);
}

TEST(Ema, TeacherStaysInStudentEnvelope) {
  auto st = ace::init(small_config());
  std::vector<std::vector<double>> lo, hi;
  for (const auto& [n, t] : st.teacher.entries()) {
    lo.emplace_back(t.values().begin(), t.values().end());
    hi.emplace_back(t.values().begin(), t.values().end());
  }
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0, 1);
  for (std::size_t step = 0; step < 200; ++step) {
    auto& se = st.student.entries();
    for (std::size_t i = 0; i < se.size(); ++i) {
      auto v = se[i].second.mutable_values();
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] += 0.1 * g(rng);
        lo[i][j] = std::min(lo[i][j], v[j]);
        hi[i][j] = std::max(hi[i][j], v[j]);
      }
    }
    ace::ema_update(st, ace::ema_lambda(step, 200));
    const auto& te = st.teacher.entries();
    for (std::size_t i = 0; i < te.size(); ++i) {
      for (std::size_t j = 0; j < te[i].second.size(); ++j) {
        ASSERT_GE(te[i].second[j], lo[i][j] - 1e-12);
        ASSERT_LE(te[i].second[j], hi[i][j] + 1e-12);
      }
    }
  }
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("ace_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  auto st = ace::init(small_config(2));
  st.step = 17;
  st.center = {0.1, -0.2, 0.3, 1e-300, -0.0, 5.5, 7, 8};
  ace::ema_update(st, 0.5);
  ace::write_checkpoint(path("a.ckpt"), ace::to_checkpoint(st));
  const auto back = ace::state_from_checkpoint(ace::read_checkpoint(path("a.ckpt")));
  EXPECT_EQ(back.config, st.config);
  EXPECT_EQ(back.step, 17u);
  EXPECT_TRUE(back.student.equals(st.student));
  EXPECT_TRUE(back.teacher.equals(st.teacher));
  EXPECT_EQ(std::memcmp(back.center.data(), st.center.data(), 8 * sizeof(double)), 0);
  EXPECT_TRUE(back.student.get("embed.w").requires_grad());
  EXPECT_FALSE(back.teacher.get("embed.w").requires_grad());
}

TEST_F(CheckpointTest, StartsWithMagic) {
  ace::write_checkpoint(path("m.ckpt"), ace::to_checkpoint(ace::init(small_config())));
  std::ifstream f(path("m.ckpt"), std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "ACE1");
}

TEST_F(CheckpointTest, TruncationIsFormatErrorWithOffset) {
  ace::write_checkpoint(path("t.ckpt"), ace::to_checkpoint(ace::init(small_config())));
  const auto size = std::filesystem::file_size(path("t.ckpt"));
  for (const auto cut : {std::uintmax_t(2), std::uintmax_t(30), size / 2, size - 1}) {
    std::filesystem::copy_file(path("t.ckpt"), path("cut.ckpt"), std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(path("cut.ckpt"), cut);
    try {
      ace::read_checkpoint(path("cut.ckpt"));
      FAIL() << "cut at " << cut;
    } catch (const ace::FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
  }
}

TEST_F(CheckpointTest, BadMagicAndMissingFile) {
  {
    std::ofstream f(path("bad.ckpt"), std::ios::binary);
    f << "NOPE and more";
  }
  EXPECT_THROW(ace::read_checkpoint(path("bad.ckpt")), ace::FormatError);
  EXPECT_THROW(ace::read_checkpoint(path("missing.ckpt")), ace::IoError);
}

}  // namespace
