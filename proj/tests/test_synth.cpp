#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "evd/synth.hpp"

namespace s = evd::synth;

namespace {

s::LabeledFrame flat_frame(evd::Geometry g, std::int64_t t, const std::vector<float>& px) {
  s::LabeledFrame f;
  f.t = t;
  f.image.geometry = g;
  f.image.pixels = px;
  f.mask.geometry = g;
  f.mask.ids.assign(g.pixels(), 0);
  return f;
}

s::SceneSpec moving_scene() {
  s::SceneSpec spec;
  spec.canvas = {48, 40};
  spec.frames = 12;
  spec.frame_interval_us = 4000;
  spec.background = 0.4;
  spec.background_texture = 0.05;
  s::ShapeSpec a;
  a.cls = s::ShapeClass::circle;
  a.size = 14;
  a.x = 14;
  a.y = 16;
  a.vx = 300;
  a.vy = -120;
  a.intensity = 0.9;
  a.texture = 0.1;
  s::ShapeSpec b;
  b.cls = s::ShapeClass::triangle;
  b.size = 12;
  b.x = 30;
  b.y = 26;
  b.vx = -200;
  b.vy = 250;
  b.intensity = 0.1;
  spec.shapes = {a, b};
  return spec;
}

}  // namespace

TEST(Synth, StaticSceneEmitsNothing) {
  s::SceneSpec spec = moving_scene();
  for (auto& sh : spec.shapes) sh.vx = sh.vy = 0;
  const auto frames = s::render(spec);
  EXPECT_TRUE(s::simulate_events(frames, {}).events.empty());
}

TEST(Synth, HandComputedSinglePixelTrace) {
  // log intensity -1 -> -0.65 -> -0.87 at C = 0.1: three ON crossings at
  // -0.9, -0.8, -0.7, then one OFF crossing at -0.8.
  const evd::Geometry g{1, 1};
  std::vector<s::LabeledFrame> frames{
      flat_frame(g, 0, {static_cast<float>(std::exp(-1.0))}),
      flat_frame(g, 1000, {static_cast<float>(std::exp(-0.65))}),
      flat_frame(g, 2000, {static_cast<float>(std::exp(-0.87))}),
  };
  s::SimulatorOptions opt;
  opt.contrast_threshold = 0.1;
  const auto ev = s::simulate_events(frames, opt).events;
  ASSERT_EQ(ev.size(), 4u);
  const std::int64_t t[] = {285, 571, 857, 1681};
  const int p[] = {1, 1, 1, -1};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ev[i].p, p[i]) << i;
    EXPECT_NEAR(static_cast<double>(ev[i].t), static_cast<double>(t[i]), 1.0) << i;
    EXPECT_EQ(ev[i].x, 0);
    EXPECT_EQ(ev[i].y, 0);
  }
}

TEST(Synth, EventCountsMatchLevelCrossings) {
  // Oracle: with u = (log I - log I_0) / C, the reference sits on an integer
  // level n. A frame at u emits floor(u) - n ON events when floor(u) > n and
  // n - ceil(u) OFF events when ceil(u) < n.
  const auto frames = s::render(moving_scene());
  s::SimulatorOptions opt;
  opt.contrast_threshold = 0.2;
  const auto stream = s::simulate_events(frames, opt);
  const std::size_t n = frames.front().image.pixels.size();
  auto L = [&](float v) { return std::log(std::clamp(static_cast<double>(v), opt.epsilon, 1.0)); };
  std::int64_t on = 0, off = 0;
  std::vector<std::int64_t> per_pixel(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double base = L(frames[0].image.pixels[i]);
    std::int64_t level = 0;
    for (std::size_t k = 1; k < frames.size(); ++k) {
      const double u = (L(frames[k].image.pixels[i]) - base) / opt.contrast_threshold;
      const auto lo = static_cast<std::int64_t>(std::floor(u));
      const auto hi = static_cast<std::int64_t>(std::ceil(u));
      if (lo > level) {
        on += lo - level;
        per_pixel[i] += lo - level;
        level = lo;
      } else if (hi < level) {
        off += level - hi;
        per_pixel[i] += level - hi;
        level = hi;
      }
    }
  }
  std::int64_t got_on = 0, got_off = 0;
  std::vector<std::int64_t> got_pixel(n, 0);
  for (const auto& e : stream.events) {
    (e.p > 0 ? got_on : got_off) += 1;
    got_pixel[static_cast<std::size_t>(e.y) * 48 + e.x] += 1;
  }
  EXPECT_GT(on + off, 100);
  EXPECT_EQ(got_on, on);
  EXPECT_EQ(got_off, off);
  EXPECT_EQ(got_pixel, per_pixel);
}

TEST(Synth, ReturningToStartIntensityBalancesPolarity) {
  const evd::Geometry g{1, 1};
  const float v0 = 0.4f;
  std::vector<s::LabeledFrame> frames{flat_frame(g, 0, {v0}), flat_frame(g, 10, {0.9f}),
                                      flat_frame(g, 20, {v0})};
  s::SimulatorOptions opt;
  opt.contrast_threshold = std::log(0.9 / 0.4) / 4;  // exactly four levels apart
  int sum = 0;
  for (const auto& e : s::simulate_events(frames, opt).events) sum += e.p;
  EXPECT_EQ(sum, 0);
}

TEST(Synth, LowerThresholdGivesMoreEvents) {
  const auto frames = s::render(moving_scene());
  std::size_t prev = SIZE_MAX;
  for (double c : {0.05, 0.1, 0.2, 0.4}) {
    s::SimulatorOptions opt;
    opt.contrast_threshold = c;
    const std::size_t count = s::simulate_events(frames, opt).events.size();
    EXPECT_LT(count, prev) << "C = " << c;
    prev = count;
  }
}

TEST(Synth, EventsAreSortedAndInBounds) {
  const auto spec = moving_scene();
  const auto stream = s::simulate_events(s::render(spec), {});
  ASSERT_FALSE(stream.events.empty());
  EXPECT_TRUE(std::is_sorted(stream.events.begin(), stream.events.end(),
                             [](const auto& a, const auto& b) { return a.t < b.t; }));
  const std::int64_t t_last = (spec.frames - 1) * spec.frame_interval_us;
  for (const auto& e : stream.events) {
    ASSERT_GE(e.x, 0);
    ASSERT_LT(e.x, spec.canvas.width);
    ASSERT_GE(e.y, 0);
    ASSERT_LT(e.y, spec.canvas.height);
    ASSERT_GE(e.t, 0);
    ASSERT_LE(e.t, t_last);
    ASSERT_TRUE(e.p == 1 || e.p == -1);
  }
}

TEST(Synth, SimulatorRejectsBadOptions) {
  const auto frames = s::render(moving_scene());
  s::SimulatorOptions opt;
  opt.contrast_threshold = 0;
  EXPECT_THROW(s::simulate_events(frames, opt), std::invalid_argument);
  opt.contrast_threshold = 0.1;
  opt.epsilon = 1.0;
  EXPECT_THROW(s::simulate_events(frames, opt), std::invalid_argument);
  auto backwards = frames;
  backwards[2].t = backwards[1].t;
  EXPECT_THROW(s::simulate_events(backwards, {}), std::invalid_argument);
}

TEST(Synth, PsnrReferencePoints) {
  s::Image a;
  a.geometry = {8, 8};
  a.pixels.assign(64, 0.3f);
  EXPECT_TRUE(std::isinf(s::psnr(a, a)));
  s::Image b = a;
  for (auto& v : b.pixels) v += 0.1f;
  // MSE = 0.01 -> 20 dB.
  EXPECT_NEAR(s::psnr(a, b), 20.0, 1e-4);
}

TEST(Synth, SquareMaskArea) {
  s::SceneSpec spec;
  spec.canvas = {64, 64};
  spec.frames = 1;
  s::ShapeSpec sq;
  sq.cls = s::ShapeClass::square;
  sq.size = 16;
  sq.x = 32;
  sq.y = 32;
  spec.shapes = {sq};
  const auto f = s::render(spec).front();
  const auto area = std::count(f.mask.ids.begin(), f.mask.ids.end(), 2);
  EXPECT_EQ(area, 256);
  EXPECT_EQ(f.mask.ids[32 * 64 + 32], 2);
  EXPECT_EQ(f.mask.ids[0], 0);
}

TEST(Synth, ShapeThatDoesNotFitIsRejected) {
  s::SceneSpec spec;
  spec.canvas = {16, 16};
  s::ShapeSpec sq;
  sq.cls = s::ShapeClass::square;
  sq.size = 20;
  spec.shapes = {sq};
  EXPECT_THROW(s::render(spec), std::invalid_argument);
}

TEST(Synth, DegradationIsDeterministicAndLossy) {
  const auto f = s::render(moving_scene()).front();
  const s::Degradation d;
  const auto a = s::degrade(f.image, d, 11);
  const auto b = s::degrade(f.image, d, 11);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_LT(s::psnr(f.image, a), 30.0);
  for (float v : a.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Synth, CorporaUseDisjointScenes) {
  s::CorpusOptions opt;
  opt.source_scenes = 6;
  opt.target_scenes = 5;
  opt.eval_scenes = 3;
  opt.samples_per_scene = 2;
  const auto c = s::make_corpora(opt);
  EXPECT_EQ(c.source.images.size(), 12u);
  EXPECT_EQ(c.source.masks.size(), 12u);
  EXPECT_EQ(c.target.samples.size(), 10u);
  EXPECT_EQ(c.target_labels.masks.size(), 10u);
  EXPECT_EQ(c.eval.samples.size(), 6u);
  std::set<std::uint64_t> all;
  for (auto v : c.source.scene_seeds) all.insert(v);
  for (auto v : c.target.scene_seeds) all.insert(v);
  for (auto v : c.eval.scene_seeds) all.insert(v);
  EXPECT_EQ(all.size(), 14u);
  // no source image equals any target APS frame
  for (const auto& img : c.source.images) {
    for (const auto& t : c.target.samples) ASSERT_NE(img.pixels, t.aps.pixels);
  }
  opt.target_seed = opt.source_seed;
  EXPECT_THROW(s::make_corpora(opt), std::invalid_argument);
}

TEST(Synth, CorpusIsReproducible) {
  s::CorpusOptions opt;
  opt.source_scenes = 2;
  opt.target_scenes = 2;
  opt.eval_scenes = 1;
  opt.samples_per_scene = 2;
  const auto a = s::make_corpora(opt);
  const auto b = s::make_corpora(opt);
  EXPECT_EQ(a.source.images.front().pixels, b.source.images.front().pixels);
  EXPECT_EQ(a.target.streams.front().events, b.target.streams.front().events);
}
