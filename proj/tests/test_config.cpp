#include <gtest/gtest.h>

#include "evd/config.hpp"
#include "evd/errors.hpp"

using evd::ConfigError;
namespace cfg = evd::config;

TEST(Config, DefaultsWhenEmpty) {
  const auto p = cfg::parse("");
  EXPECT_EQ(p.distill.weights.lambda_da, 0.1);
  EXPECT_EQ(p.distill.weights.tau, 4.0);
  EXPECT_EQ(p.distill.weights.sigma, 9);
  EXPECT_EQ(p.distill.data.window_us, 50000);
  EXPECT_EQ(p.corpus.window_us, 50000);
}

TEST(Config, ReadsSectionsAndOverrides) {
  const std::string ini =
      "[run]\nsteps = 12\nlr = 0.002\n[model]\nbase_width = 8\n[data]\nwindow_ms = 20\n"
      "[synth]\ncanvas = 48x32\n";
  const auto p = cfg::parse(ini, {"run.steps=30", "weights.tau=2"});
  EXPECT_EQ(p.distill.optim.steps, 30);
  EXPECT_DOUBLE_EQ(p.distill.optim.lr, 0.002);
  EXPECT_EQ(p.distill.model.base_width, 8);
  EXPECT_EQ(p.distill.weights.tau, 2.0);
  EXPECT_EQ(p.distill.data.window_us, 20000);
  EXPECT_EQ(p.corpus.canvas.width, 48);
  EXPECT_EQ(p.corpus.canvas.height, 32);
}

TEST(Config, PresetThenExplicitToggles) {
  const auto p = cfg::parse("[run]\npreset = PI\n[toggles]\nag = true\n");
  EXPECT_TRUE(p.distill.toggles.pi);
  EXPECT_TRUE(p.distill.toggles.ag);
  EXPECT_FALSE(p.distill.toggles.dm);
}

TEST(Config, NoApsModeDropsApsStudent) {
  const auto p = cfg::parse("[run]\nmode = segmentation_no_aps\n");
  EXPECT_FALSE(p.distill.toggles.use_s_aps);
  EXPECT_FALSE(p.distill.toggles.ml);
  EXPECT_THROW(cfg::parse("[run]\nmode = segmentation_no_aps\n[toggles]\nuse_s_aps = true\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[run]\nmode = segmentation_no_aps\n[toggles]\nbmr = false\n"), ConfigError);
}

TEST(Config, RejectsUnknownAndMalformed) {
  EXPECT_THROW(cfg::parse("[nonsense]\na = 1\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[run]\nstepz = 1\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[run]\nsteps = many\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[run]\nlr = 0\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[toggles]\npi = maybe\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[weights]\nsigma = 4\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[synth]\ncanvas = 64\n"), ConfigError);
  EXPECT_THROW(cfg::parse("", {"steps=3"}), ConfigError);
  EXPECT_THROW(cfg::parse("", {"run.nope=3"}), ConfigError);
  EXPECT_THROW(cfg::parse("[run]\npreset = best\n"), ConfigError);
  EXPECT_THROW(cfg::parse("[synth]\nsource_seed = 4\ntarget_seed = 4\n"), ConfigError);
  EXPECT_THROW(cfg::load("/nonexistent/evd.ini"), ConfigError);
}

TEST(Config, IniRoundTrip) {
  const auto p = cfg::parse(
      "[run]\nseed = 42\nlr = 0.00031\npreset = PI+AG\n[model]\nag_tap = dec1\naggregation = max\n"
      "[data]\nrepresentation = voxel\nbins = 5\n[synth]\ncanvas = 32x32\ngamma = 1.7\n");
  const auto q = cfg::parse(cfg::to_ini(p));
  EXPECT_EQ(cfg::to_ini(p), cfg::to_ini(q));
  EXPECT_EQ(q.distill.optim.seed, 42u);
  EXPECT_DOUBLE_EQ(q.distill.optim.lr, 0.00031);
  EXPECT_EQ(q.distill.toggles, evd::engine::preset("PI+AG"));
  EXPECT_EQ(q.distill.model.ag_tap, "dec1");
  EXPECT_EQ(q.distill.model.aggregation, evd::losses::Aggregation::max);
  EXPECT_EQ(q.distill.data.representation, evd::engine::Representation::voxel);
  EXPECT_DOUBLE_EQ(q.corpus.degradation.gamma, 1.7);
}
