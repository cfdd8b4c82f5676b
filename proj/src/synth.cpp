#include "evd/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

namespace evd::synth {
namespace {

constexpr int kSuper = 4;  // supersampling factor per axis for intensity coverage

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(base) ^ tag) + index);
}

struct HalfExtent {
  double x;
  double y;
};

HalfExtent half_extent(const ShapeSpec& s) {
  switch (s.cls) {
    case ShapeClass::circle:
    case ShapeClass::square: return {s.size / 2, s.size / 2};
    case ShapeClass::triangle: return {s.size / 2, s.size / std::sqrt(3.0)};
    case ShapeClass::bar: return {s.size / 6, s.size / 2};
    case ShapeClass::background: break;
  }
  throw std::invalid_argument("background is not a drawable shape");
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

bool inside(const ShapeSpec& s, double cx, double cy, double px, double py) {
  const double dx = px - cx;
  const double dy = py - cy;
  switch (s.cls) {
    case ShapeClass::circle: return dx * dx + dy * dy <= s.size * s.size / 4;
    case ShapeClass::square: return std::abs(dx) <= s.size / 2 && std::abs(dy) <= s.size / 2;
    case ShapeClass::bar: return std::abs(dx) <= s.size / 6 && std::abs(dy) <= s.size / 2;
    case ShapeClass::triangle: {
      const double h = s.size * std::sqrt(3.0) / 2;
      const double ax = cx, ay = cy - 2 * h / 3;
      const double bx = cx + s.size / 2, by = cy + h / 3;
      const double qx = cx - s.size / 2, qy = cy + h / 3;
      const double e0 = edge(ax, ay, bx, by, px, py);
      const double e1 = edge(bx, by, qx, qy, px, py);
      const double e2 = edge(qx, qy, ax, ay, px, py);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
    case ShapeClass::background: break;
  }
  return false;
}

/// Position along one axis: reflecting (triangle wave) or wrapping motion.
double trajectory(double start, double velocity, double seconds, double lo, double hi,
                  Boundary boundary) {
  const double span = hi - lo;
  if (span <= 0) return lo;
  double u = start - lo + velocity * seconds;
  if (boundary == Boundary::wrap) {
    u = std::fmod(u, span);
    if (u < 0) u += span;
    return lo + u;
  }
  const double period = 2 * span;
  u = std::fmod(u, period);
  if (u < 0) u += period;
  return lo + (u <= span ? u : period - u);
}

double shape_intensity(const ShapeSpec& s, double cx, double cy, double px, double py) {
  const double phase = 2 * std::numbers::pi * ((px - cx) + (py - cy)) / 6.0;
  return std::clamp(s.intensity * (1.0 + s.texture * std::sin(phase)), 0.0, 1.0);
}

double background_intensity(const SceneSpec& spec, double px, double py) {
  const double tex = std::sin(2 * std::numbers::pi * px / 11.0) *
                     std::sin(2 * std::numbers::pi * py / 9.0);
  return std::clamp(spec.background * (1.0 + spec.background_texture * tex), 0.0, 1.0);
}

}  // namespace

const char* class_name(int id) {
  static constexpr std::array<const char*, kClassCount> names{"background", "circle", "square",
                                                              "triangle", "bar"};
  return id >= 0 && id < kClassCount ? names[static_cast<std::size_t>(id)] : "unknown";
}

void validate(const SceneSpec& spec) {
  if (spec.canvas.width <= 0 || spec.canvas.height <= 0) {
    throw std::invalid_argument("scene canvas must be non-empty");
  }
  if (spec.frames < 1) throw std::invalid_argument("scene needs at least one frame");
  if (spec.frame_interval_us <= 0) throw std::invalid_argument("frame interval must be positive");
  for (const ShapeSpec& s : spec.shapes) {
    if (s.cls == ShapeClass::background) throw std::invalid_argument("shape class 0 is background");
    const HalfExtent h = half_extent(s);
    if (s.size <= 0 || 2 * h.x > spec.canvas.width || 2 * h.y > spec.canvas.height) {
      throw std::invalid_argument("shape of size " + std::to_string(s.size) +
                                  " does not fit the canvas");
    }
    if (s.intensity < 0 || s.intensity > 1) throw std::invalid_argument("intensity outside [0, 1]");
  }
}

std::vector<LabeledFrame> render(const SceneSpec& spec) {
  validate(spec);
  const int w = spec.canvas.width;
  const int h = spec.canvas.height;
  std::vector<LabeledFrame> frames;
  frames.reserve(static_cast<std::size_t>(spec.frames));

  std::vector<float> bg(spec.canvas.pixels());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bg[static_cast<std::size_t>(y) * w + x] =
          static_cast<float>(background_intensity(spec, x + 0.5, y + 0.5));
    }
  }

  for (int k = 0; k < spec.frames; ++k) {
    LabeledFrame f;
    f.t = static_cast<std::int64_t>(k) * spec.frame_interval_us;
    f.image.geometry = spec.canvas;
    f.image.pixels = bg;
    f.mask.geometry = spec.canvas;
    f.mask.ids.assign(spec.canvas.pixels(), 0);
    const double seconds = static_cast<double>(f.t) * 1e-6;
    for (const ShapeSpec& s : spec.shapes) {
      const HalfExtent he = half_extent(s);
      const double cx = trajectory(s.x, s.vx, seconds, he.x, w - he.x, spec.boundary);
      const double cy = trajectory(s.y, s.vy, seconds, he.y, h - he.y, spec.boundary);
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - he.x)) - 1);
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + he.x)) + 1);
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - he.y)) - 1);
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + he.y)) + 1);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy) {
            for (int sx = 0; sx < kSuper; ++sx) {
              hits += inside(s, cx, cy, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper) ? 1 : 0;
            }
          }
          if (hits == 0) continue;
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          const double cov = static_cast<double>(hits) / (kSuper * kSuper);
          const double v = shape_intensity(s, cx, cy, x + 0.5, y + 0.5);
          f.image.pixels[i] = static_cast<float>((1 - cov) * f.image.pixels[i] + cov * v);
          if (inside(s, cx, cy, x + 0.5, y + 0.5)) f.mask.ids[i] = static_cast<int>(s.cls);
        }
      }
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

EventStream simulate_events(const std::vector<LabeledFrame>& frames, const SimulatorOptions& opt) {
  if (!(opt.contrast_threshold > 0)) {
    throw std::invalid_argument("contrast threshold must be positive");
  }
  if (!(opt.epsilon > 0) || opt.epsilon >= 1) throw std::invalid_argument("epsilon must be in (0, 1)");
  EventStream out;
  if (frames.empty()) return out;
  const Geometry g = frames.front().image.geometry;
  out.geometry = g;
  const std::size_t n = g.pixels();
  const double c = opt.contrast_threshold;
  auto log_i = [&](float v) { return std::log(std::clamp(static_cast<double>(v), opt.epsilon, 1.0)); };

  // The reference of pixel i is base[i] + level[i] * c. Levels are counted
  // on u = (log I - base) / c so that returning to the starting intensity
  // lands exactly on the starting level.
  std::vector<double> base(n);
  std::vector<std::int64_t> level(n, 0);
  for (std::size_t i = 0; i < n; ++i) base[i] = log_i(frames.front().image.pixels[i]);

  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const auto& a = frames[k].image.pixels;
    const auto& b = frames[k + 1].image.pixels;
    if (frames[k + 1].image.geometry != g) throw std::invalid_argument("frame geometry changes");
    const std::int64_t t0 = frames[k].t;
    const std::int64_t dt = frames[k + 1].t - t0;
    if (dt <= 0) throw std::invalid_argument("frame timestamps must increase");
    for (std::size_t i = 0; i < n; ++i) {
      const double u0 = (log_i(a[i]) - base[i]) / c;
      const double u1 = (log_i(b[i]) - base[i]) / c;
      if (u1 == u0) continue;
      const int sign = u1 > u0 ? 1 : -1;
      while (sign > 0 ? u1 >= static_cast<double>(level[i] + 1) : u1 <= static_cast<double>(level[i] - 1)) {
        level[i] += sign;
        const double alpha = std::clamp((static_cast<double>(level[i]) - u0) / (u1 - u0), 0.0, 1.0);
        Event e;
        e.x = static_cast<std::int32_t>(i % static_cast<std::size_t>(g.width));
        e.y = static_cast<std::int32_t>(i / static_cast<std::size_t>(g.width));
        e.t = t0 + static_cast<std::int64_t>(std::floor(alpha * static_cast<double>(dt)));
        e.p = static_cast<std::int8_t>(sign);
        out.events.push_back(e);
      }
    }
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const Event& x, const Event& y) { return x.t < y.t; });
  return out;
}

Image degrade(const Image& clean, const Degradation& d, std::uint64_t seed) {
  const Geometry g = clean.geometry;
  const int w = g.width;
  const int h = g.height;
  std::vector<float> tone(clean.pixels.size());
  for (std::size_t i = 0; i < tone.size(); ++i) {
    const double v = std::pow(std::clamp(static_cast<double>(clean.pixels[i]), 0.0, 1.0), d.gamma);
    tone[i] = static_cast<float>(0.5 + d.contrast * (v - 0.5));
  }
  Image out;
  out.geometry = g;
  out.pixels.assign(tone.size(), 0.0f);
  const int r = d.blur_px / 2;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      int cnt = 0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          const int xx = std::clamp(x + dx, 0, w - 1);
          s += tone[static_cast<std::size_t>(yy) * w + xx];
          ++cnt;
        }
      }
      out.pixels[static_cast<std::size_t>(y) * w + x] = static_cast<float>(s / cnt);
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, d.noise_sigma);
  for (float& v : out.pixels) {
    v = static_cast<float>(std::clamp(v + (d.noise_sigma > 0 ? noise(rng) : 0.0), 0.0, 1.0));
  }
  return out;
}

double psnr(const Image& reference, const Image& test) {
  if (reference.pixels.size() != test.pixels.size() || reference.pixels.empty()) {
    throw std::invalid_argument("psnr: images differ in size");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < reference.pixels.size(); ++i) {
    const double d = static_cast<double>(reference.pixels[i]) - test.pixels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(reference.pixels.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

SceneSpec random_scene(const SceneFamily& f, Geometry canvas, int frames,
                       std::int64_t frame_interval_us, std::uint64_t seed, bool single_shape) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SceneSpec s;
  s.canvas = canvas;
  s.frames = frames;
  s.frame_interval_us = frame_interval_us;
  s.seed = seed;
  s.background = uni(f.min_background, f.max_background);
  s.background_texture = f.background_texture;
  const int count =
      single_shape ? 1 : std::uniform_int_distribution<int>(f.min_shapes, f.max_shapes)(rng);
  for (int i = 0; i < count; ++i) {
    ShapeSpec sh;
    sh.cls = static_cast<ShapeClass>(std::uniform_int_distribution<int>(1, kClassCount - 1)(rng));
    sh.size = uni(f.min_size, f.max_size);
    if (sh.cls == ShapeClass::bar) sh.size *= 1.4;
    sh.size = std::min(sh.size, 0.9 * std::min(canvas.width, canvas.height));
    sh.x = uni(0, canvas.width);
    sh.y = uni(0, canvas.height);
    const double speed = uni(f.min_speed, f.max_speed);
    const double heading = uni(0, 2 * std::numbers::pi);
    sh.vx = speed * std::cos(heading);
    sh.vy = speed * std::sin(heading);
    // keep a visible contrast against the background
    do {
      sh.intensity = uni(f.min_intensity, f.max_intensity);
    } while (std::abs(std::log(std::max(sh.intensity, 1e-3) / s.background)) < 0.35);
    sh.texture = f.texture;
    s.shapes.push_back(sh);
  }
  return s;
}

EventWindow TargetCorpus::window(std::size_t i, std::int64_t wus) const {
  const TargetSample& s = samples.at(i);
  return slice_by_time(streams.at(s.scene), wus, s.anchor_us);
}

namespace {

constexpr std::uint64_t kSourceTag = 0x534F55524345ULL;  // "SOURCE"
constexpr std::uint64_t kTargetTag = 0x544152474554ULL;  // "TARGET"
constexpr std::uint64_t kEvalTag = 0x4556414CULL;        // "EVAL"
constexpr std::uint64_t kApsTag = 0x415053ULL;           // "APS"

std::vector<int> anchor_frames(const CorpusOptions& opt) {
  const int first = static_cast<int>((opt.window_us + opt.frame_interval_us - 1) / opt.frame_interval_us);
  const int last = opt.frames_per_scene - 1;
  if (first > last) {
    throw std::invalid_argument("scenes are shorter than the event window");
  }
  std::vector<int> out;
  const int n = opt.samples_per_scene;
  for (int j = 0; j < n; ++j) {
    const int k = n == 1 ? last : first + static_cast<int>(std::lround(
                                              static_cast<double>(j) * (last - first) / (n - 1)));
    out.push_back(k);
  }
  return out;
}

void build_target(const CorpusOptions& opt, std::uint64_t tag, int scenes, TargetCorpus& corpus,
                  SealedLabels& labels) {
  corpus.geometry = opt.canvas;
  corpus.window_us = opt.window_us;
  labels.task = opt.task;
  const bool single = opt.task == Task::recognition;
  const auto anchors = anchor_frames(opt);
  for (int s = 0; s < scenes; ++s) {
    const std::uint64_t seed = derive_seed(opt.target_seed, tag, static_cast<std::uint64_t>(s));
    const SceneSpec spec = random_scene(opt.target_family, opt.canvas, opt.frames_per_scene,
                                        opt.frame_interval_us, seed, single);
    const auto frames = render(spec);
    EventStream stream = simulate_events(frames, opt.simulator);
    stream.geometry = opt.canvas;
    corpus.streams.push_back(std::move(stream));
    corpus.scene_seeds.push_back(seed);
    for (int k : anchors) {
      TargetSample ts;
      ts.scene = static_cast<std::size_t>(s);
      ts.anchor_us = frames[static_cast<std::size_t>(k)].t;
      ts.aps = degrade(frames[static_cast<std::size_t>(k)].image, opt.degradation,
                       derive_seed(seed, kApsTag, static_cast<std::uint64_t>(k)));
      corpus.samples.push_back(std::move(ts));
      if (single) {
        labels.classes.push_back(static_cast<int>(spec.shapes.front().cls));
      } else {
        labels.masks.push_back(frames[static_cast<std::size_t>(k)].mask);
      }
    }
  }
}

}  // namespace

Corpora make_corpora(const CorpusOptions& opt) {
  if (opt.source_seed == opt.target_seed) {
    throw std::invalid_argument("source and target corpora need distinct seeds");
  }
  if (opt.samples_per_scene < 1) throw std::invalid_argument("samples_per_scene must be >= 1");
  Corpora c;
  const bool single = opt.task == Task::recognition;
  const auto anchors = anchor_frames(opt);
  for (int s = 0; s < opt.source_scenes; ++s) {
    const std::uint64_t seed = derive_seed(opt.source_seed, kSourceTag, static_cast<std::uint64_t>(s));
    const SceneSpec spec = random_scene(opt.source_family, opt.canvas, opt.frames_per_scene,
                                        opt.frame_interval_us, seed, single);
    auto frames = render(spec);
    c.source.scene_seeds.push_back(seed);
    for (int k : anchors) {
      auto& f = frames[static_cast<std::size_t>(k)];
      c.source.images.push_back(f.image);
      if (single) {
        c.source.classes.push_back(static_cast<int>(spec.shapes.front().cls));
      } else {
        c.source.masks.push_back(f.mask);
      }
    }
  }
  build_target(opt, kTargetTag, opt.target_scenes, c.target, c.target_labels);
  build_target(opt, kEvalTag, opt.eval_scenes, c.eval, c.eval_labels);

  std::set<std::uint64_t> seen(c.source.scene_seeds.begin(), c.source.scene_seeds.end());
  for (const auto* list : {&c.target.scene_seeds, &c.eval.scene_seeds}) {
    for (auto s : *list) {
      if (!seen.insert(s).second) throw std::logic_error("scene seed collision between corpora");
    }
  }
  return c;
}

}  // namespace evd::synth
