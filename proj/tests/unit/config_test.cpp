#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ace/config.hpp"
#include "ace/error.hpp"
#include "ace/log.hpp"

namespace {

using ace::Settings;

TEST(Settings, ParsesCommentsBlanksAndWhitespace) {
  Settings s = Settings::parse("# header\n\n  a.b = 3 \nname=hello world\r\n", "t");
  EXPECT_EQ(s.take_size("a.b", 0), 3u);
  EXPECT_EQ(s.take_string("name", ""), "hello world");
  EXPECT_TRUE(s.unused().empty());
}

TEST(Settings, DuplicateKeyNamesTheLine) {
  try {
    Settings::parse("a = 1\n\na = 2\n", "c.cfg");
    FAIL();
  } catch (const ace::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("c.cfg:3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Settings::parse("no equals sign\n", "t"), ace::FormatError);
  EXPECT_THROW(Settings::parse(" = 4\n", "t"), ace::FormatError);
}

TEST(Settings, OverridesReplaceFileValues) {
  Settings s = Settings::parse("seed = 1\n", "t");
  s.apply_override("seed=9");
  s.apply_override("extra = x");
  EXPECT_EQ(s.take_u64("seed", 0), 9u);
  EXPECT_EQ(s.take_string("extra", ""), "x");
  EXPECT_THROW(s.apply_override("novalue"), ace::FormatError);
}

TEST(Settings, TypedReadsFallBackAndValidate) {
  Settings s = Settings::parse("d = 0.25\nn = 12\nb1 = on\nb2 = no\nbad = 1.5x\nneg = -3\n", "t");
  EXPECT_EQ(s.take_double("d", 0), 0.25);
  EXPECT_EQ(s.take_double("missing", 7.5), 7.5);
  EXPECT_EQ(s.take_size("n", 0), 12u);
  EXPECT_TRUE(s.take_bool("b1", false));
  EXPECT_FALSE(s.take_bool("b2", true));
  EXPECT_THROW(s.take_double("bad", 0), ace::ParameterError);
  EXPECT_THROW(s.take_size("neg", 0), ace::ParameterError);
  EXPECT_THROW(s.take_bool("d", false), ace::ParameterError);
}

TEST(Settings, UnknownKeysRejected) {
  Settings s = Settings::parse("known = 1\ntypo = 2\nother = 3\n", "t");
  s.take_size("known", 0);
  EXPECT_EQ(s.unused(), (std::vector<std::string>{"other", "typo"}));
  try {
    s.reject_unused();
    FAIL();
  } catch (const ace::ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("'typo'"), std::string::npos);
  }
}

TEST(Settings, RenderIsSortedAndReparses) {
  Settings s;
  s.set("z", "1");
  s.set("a.b", "two words");
  EXPECT_EQ(s.render(), "a.b = two words\nz = 1\n");
  Settings back = Settings::parse(s.render(), "r");
  EXPECT_EQ(back.render(), s.render());
}

TEST(Settings, SaveAndLoad) {
  const auto path = std::filesystem::temp_directory_path() / "ace_settings_test.cfg";
  Settings s;
  s.set("k", "v");
  s.save(path);
  EXPECT_EQ(Settings::load(path).render(), "k = v\n");
  std::filesystem::remove(path);
  EXPECT_THROW(Settings::load(path), ace::IoError);
}

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(ace::format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(ace::format_double(5e-4)), 5e-4);
  EXPECT_EQ(ace::format_double(2.0), "2");
  const double x = 0.1 + 0.2;
  EXPECT_EQ(std::stod(ace::format_double(x)), x);
}

TEST(GridSettings, RoundTripAndValidation) {
  Settings s;
  ace::write_grid(s, ace::GridSpec::paper_defaults());
  EXPECT_EQ(ace::read_grid(s, ace::GridSpec::desk_defaults()), ace::GridSpec::paper_defaults());
  Settings bad = Settings::parse("grid.c1 = 8\ngrid.c2 = 8\n", "t");
  EXPECT_THROW(ace::read_grid(bad, ace::GridSpec::desk_defaults()), ace::ParameterError);
  // token_side follows c1 unless given.
  Settings c1 = Settings::parse("grid.c1 = 4\ngrid.c2 = 8\n", "t");
  EXPECT_EQ(ace::read_grid(c1, ace::GridSpec::desk_defaults()).token_side, 4u);
}

TEST(PhantomSettings, RoundTrip) {
  ace::PhantomSpec p;
  p.layout.texture_period = 0.05;
  p.jitter.scale = 0.01;
  Settings s;
  ace::write_phantom(s, p);
  Settings copy = Settings::parse(s.render(), "t");
  const ace::PhantomSpec back = ace::read_phantom(copy, ace::PhantomSpec{});
  copy.reject_unused();
  Settings again;
  ace::write_phantom(again, back);
  EXPECT_EQ(again.render(), s.render());
}

TEST(Log, LevelFromEnvironment) {
  const ace::log::Level saved = ace::log::level();
  ::setenv("ACE_LOG", "debug", 1);
  ace::log::configure_from_env();
  EXPECT_EQ(ace::log::level(), ace::log::Level::debug);
  ::setenv("ACE_LOG", "chatty", 1);
  EXPECT_THROW(ace::log::configure_from_env(), ace::ParameterError);
  ::unsetenv("ACE_LOG");
  ace::log::configure_from_env();
  EXPECT_EQ(ace::log::level(), ace::log::Level::warn);
  ace::log::set_level(saved);
}

}  // namespace
