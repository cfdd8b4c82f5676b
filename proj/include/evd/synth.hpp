#pragma once

// Desk-scale labeled scenes, an event-camera simulator and corpus assembly.

#include <cstdint>
#include <string>
#include <vector>

#include "evd/event_core.hpp"

namespace evd::synth {

enum class ShapeClass : int { background = 0, circle = 1, square = 2, triangle = 3, bar = 4 };
inline constexpr int kClassCount = 5;

const char* class_name(int id);

struct ShapeSpec {
  ShapeClass cls = ShapeClass::circle;
  double size = 16.0;       // diameter / side / bar length, pixels
  double x = 32.0;          // initial center
  double y = 32.0;
  double vx = 0.0;          // pixels per second
  double vy = 0.0;
  double intensity = 0.8;   // [0, 1]
  double texture = 0.0;     // amplitude of object-attached stripes
};

enum class Boundary { bounce, wrap };

struct SceneSpec {
  Geometry canvas{64, 64};
  std::vector<ShapeSpec> shapes;
  int frames = 16;
  std::int64_t frame_interval_us = 5000;
  std::uint64_t seed = 0;
  double background = 0.5;
  double background_texture = 0.0;
  Boundary boundary = Boundary::bounce;
};

/// Single-channel H x W image, row-major.
struct Image {
  Geometry geometry;
  std::vector<float> pixels;

  [[nodiscard]] float at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * geometry.width + x];
  }
};

struct LabelMask {
  Geometry geometry;
  std::vector<int> ids;
};

struct LabeledFrame {
  Image image;
  LabelMask mask;
  std::int64_t t = 0;
};

/// Throws std::invalid_argument when a shape cannot fit on the canvas.
void validate(const SceneSpec& spec);

std::vector<LabeledFrame> render(const SceneSpec& spec);

struct SimulatorOptions {
  double contrast_threshold = 0.15;
  double epsilon = 1e-3;  // intensities are clamped to [epsilon, 1] before the log
};

/// Log-intensity threshold-crossing simulator. The per-pixel reference level
/// moves by +-C per emitted event; timestamps are interpolated linearly
/// between frames. Output is stable-sorted by time.
EventStream simulate_events(const std::vector<LabeledFrame>& frames, const SimulatorOptions& opt);

struct Degradation {
  double gamma = 2.2;
  double contrast = 0.5;
  double noise_sigma = 0.02;
  int blur_px = 3;
};

Image degrade(const Image& clean, const Degradation& d, std::uint64_t seed);

/// Peak signal-to-noise ratio for [0, 1] images, in dB.
double psnr(const Image& reference, const Image& test);

/// Distribution of randomly generated scenes.
struct SceneFamily {
  int min_shapes = 1;
  int max_shapes = 3;
  double min_size = 12.0;
  double max_size = 24.0;
  double min_speed = 150.0;  // pixels / second
  double max_speed = 400.0;
  double min_intensity = 0.05;
  double max_intensity = 0.95;
  double min_background = 0.3;
  double max_background = 0.7;
  double texture = 0.15;
  double background_texture = 0.05;
};

SceneSpec random_scene(const SceneFamily& family, Geometry canvas, int frames,
                       std::int64_t frame_interval_us, std::uint64_t seed, bool single_shape);

enum class Task { segmentation, recognition };

struct SourceCorpus {
  std::vector<Image> images;
  std::vector<LabelMask> masks;   // segmentation
  std::vector<int> classes;       // recognition
  std::vector<std::uint64_t> scene_seeds;
};

struct TargetSample {
  std::size_t scene = 0;
  std::int64_t anchor_us = 0;
  Image aps;
};

/// Unlabeled target data: one event stream per scene plus labeled anchors.
/// Labels live in SealedLabels and are never reachable from here.
struct TargetCorpus {
  Geometry geometry;
  std::int64_t window_us = 50000;
  std::vector<EventStream> streams;
  std::vector<TargetSample> samples;
  std::vector<std::uint64_t> scene_seeds;

  [[nodiscard]] EventWindow window(std::size_t i) const { return window(i, window_us); }
  [[nodiscard]] EventWindow window(std::size_t i, std::int64_t window_us) const;
};

/// Evaluation-only ground truth for a TargetCorpus.
struct SealedLabels {
  Task task = Task::segmentation;
  std::vector<LabelMask> masks;
  std::vector<int> classes;
};

struct CorpusOptions {
  Task task = Task::segmentation;
  Geometry canvas{64, 64};
  int source_scenes = 250;
  int target_scenes = 250;
  int eval_scenes = 40;
  int frames_per_scene = 24;
  std::int64_t frame_interval_us = 5000;
  int samples_per_scene = 8;
  std::int64_t window_us = 50000;
  SimulatorOptions simulator;
  Degradation degradation;
  SceneFamily source_family;
  SceneFamily target_family;
  std::uint64_t source_seed = 1;
  std::uint64_t target_seed = 2;
};

struct Corpora {
  SourceCorpus source;
  TargetCorpus target;
  SealedLabels target_labels;
  TargetCorpus eval;
  SealedLabels eval_labels;
};

/// Source frames come from scenes seeded by source_seed; target and eval
/// scenes from target_seed. Scene seeds of the two families never overlap.
Corpora make_corpora(const CorpusOptions& opt);

}  // namespace evd::synth
