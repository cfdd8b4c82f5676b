#pragma once

// Event data model, stream slicing and dense encoders.
//
// Everything here is a pure function over immutable inputs. Timestamps are
// integer microseconds; windows are half-open [t_start, t_end).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evd {

struct Geometry {
  int width = 0;
  int height = 0;

  [[nodiscard]] std::size_t pixels() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }
  bool operator==(const Geometry&) const = default;
};

struct Event {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int64_t t = 0;  // microseconds
  std::int8_t p = 1;   // -1 or +1

  bool operator==(const Event&) const = default;
};

/// A t-sorted event sequence with its sensor geometry.
struct EventStream {
  std::vector<Event> events;
  Geometry geometry;
};

struct EventWindow {
  std::vector<Event> events;
  std::int64_t t_start = 0;
  std::int64_t t_end = 0;
  Geometry geometry;
  /// Set by count slicing when fewer than the requested events were available.
  bool short_window = false;
};

/// B x H x W, stored in double so that signed mass is conserved to rounding.
struct VoxelGrid {
  int bins = 0;
  Geometry geometry;
  std::int64_t t_start = 0;
  std::int64_t t_end = 0;
  std::vector<double> data;

  [[nodiscard]] double at(int b, int y, int x) const {
    return data[(static_cast<std::size_t>(b) * geometry.height + y) * geometry.width + x];
  }
  [[nodiscard]] double sum() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
  }
};

/// C x H x W with values in [0, 1]; channel_layout names every channel.
struct MultiChannelImage {
  Geometry geometry;
  std::vector<std::string> channel_layout;
  std::vector<float> data;

  [[nodiscard]] int channels() const { return static_cast<int>(channel_layout.size()); }
  [[nodiscard]] float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * geometry.height + y) * geometry.width + x];
  }
};

/// Raw per-polarity, per-temporal-bin counts, C = 2B, same layout as to_multichannel.
struct EventHistogram {
  int bins = 0;
  Geometry geometry;
  std::vector<std::uint32_t> counts;

  [[nodiscard]] std::uint32_t at(int c, int y, int x) const {
    return counts[(static_cast<std::size_t>(c) * geometry.height + y) * geometry.width + x];
  }
};

inline void validate_event(const Event& e, const Geometry& g) {
  if (e.p != 1 && e.p != -1) {
    throw std::invalid_argument("event polarity must be -1 or +1, got " + std::to_string(e.p));
  }
  if (e.x < 0 || e.y < 0 || e.x >= g.width || e.y >= g.height) {
    throw std::invalid_argument("event (" + std::to_string(e.x) + ", " + std::to_string(e.y) +
                                ") outside sensor " + std::to_string(g.width) + "x" +
                                std::to_string(g.height));
  }
  if (e.t < 0) throw std::invalid_argument("negative event timestamp");
}

/// Index of the first event whose timestamp is smaller than its predecessor's, or size().
inline std::size_t first_inversion(std::span<const Event> events) {
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i].t < events[i - 1].t) return i;
  }
  return events.size();
}

inline void require_sorted(std::span<const Event> events) {
  const std::size_t inv = first_inversion(events);
  if (inv != events.size()) {
    throw std::invalid_argument("event stream not sorted by timestamp: first inversion at index " +
                                std::to_string(inv) + " (t=" + std::to_string(events[inv].t) +
                                " after t=" + std::to_string(events[inv - 1].t) + ")");
  }
}

/// All events with anchor_us - window_us <= t < anchor_us.
inline EventWindow slice_by_time(const EventStream& stream, std::int64_t window_us,
                                 std::int64_t anchor_us) {
  if (window_us <= 0) throw std::invalid_argument("window_us must be positive");
  require_sorted(stream.events);
  EventWindow w;
  w.geometry = stream.geometry;
  w.t_end = anchor_us;
  w.t_start = anchor_us - window_us;
  auto by_t = [](const Event& e, std::int64_t t) { return e.t < t; };
  auto lo = std::lower_bound(stream.events.begin(), stream.events.end(), w.t_start, by_t);
  auto hi = std::lower_bound(lo, stream.events.end(), w.t_end, by_t);
  w.events.assign(lo, hi);
  return w;
}

/// Same as above but over an existing window (keeps the window's geometry).
inline EventWindow slice_by_time(const EventWindow& window, std::int64_t window_us,
                                 std::int64_t anchor_us) {
  EventStream s{window.events, window.geometry};
  return slice_by_time(s, window_us, anchor_us);
}

/// The n most recent events before anchor_index (exclusive), i.e.
/// events[anchor_index - n, anchor_index). The window spans
/// [t of first event, t of last event + 1).
inline EventWindow slice_by_count(const EventStream& stream, std::size_t n,
                                  std::size_t anchor_index) {
  if (n == 0) throw std::invalid_argument("slice_by_count: n must be >= 1");
  if (anchor_index > stream.events.size()) {
    throw std::invalid_argument("slice_by_count: anchor_index " + std::to_string(anchor_index) +
                                " beyond stream length " + std::to_string(stream.events.size()));
  }
  EventWindow w;
  w.geometry = stream.geometry;
  const std::size_t begin = anchor_index >= n ? anchor_index - n : 0;
  w.short_window = anchor_index - begin < n;
  w.events.assign(stream.events.begin() + static_cast<std::ptrdiff_t>(begin),
                  stream.events.begin() + static_cast<std::ptrdiff_t>(anchor_index));
  if (!w.events.empty()) {
    w.t_start = w.events.front().t;
    w.t_end = w.events.back().t + 1;
  } else if (anchor_index > 0) {
    w.t_start = w.t_end = stream.events[anchor_index - 1].t;
  }
  return w;
}

/// Temporal bilinear voxel grid: each event adds p * max(0, 1 - |b - t*|) to bin b
/// with t* = (t - t_start) / (t_end - t_start) * (B - 1).
inline VoxelGrid to_voxel_grid(const EventWindow& window, int bins) {
  if (bins < 1) throw std::invalid_argument("to_voxel_grid: bins must be >= 1");
  const Geometry& g = window.geometry;
  VoxelGrid grid;
  grid.bins = bins;
  grid.geometry = g;
  grid.t_start = window.t_start;
  grid.t_end = window.t_end;
  grid.data.assign(static_cast<std::size_t>(bins) * g.pixels(), 0.0);
  const double span = static_cast<double>(window.t_end - window.t_start);
  for (const Event& e : window.events) {
    validate_event(e, g);
    double ts = 0.0;
    if (span > 0.0 && bins > 1) {
      ts = static_cast<double>(e.t - window.t_start) / span * static_cast<double>(bins - 1);
      ts = std::clamp(ts, 0.0, static_cast<double>(bins - 1));
    }
    const int b0 = static_cast<int>(std::floor(ts));
    const double frac = ts - b0;
    const std::size_t pix = static_cast<std::size_t>(e.y) * g.width + e.x;
    grid.data[static_cast<std::size_t>(b0) * g.pixels() + pix] += e.p * (1.0 - frac);
    if (frac > 0.0 && b0 + 1 < bins) {
      grid.data[static_cast<std::size_t>(b0 + 1) * g.pixels() + pix] += e.p * frac;
    }
  }
  return grid;
}

/// Temporal bin of an event for the count encoders: floor((t - t_start) * B /
/// (t_end - t_start)) in exact integer arithmetic, clamped to [0, B - 1].
/// Degenerate windows map to bin 0.
inline int count_bin(const Event& e, std::int64_t t_start, std::int64_t t_end, int bins) {
  if (t_end <= t_start || bins == 1) return 0;
  const __int128 num = static_cast<__int128>(e.t - t_start) * bins;
  const __int128 b = num / (t_end - t_start);
  return static_cast<int>(std::clamp<__int128>(b, 0, bins - 1));
}

inline std::vector<std::string> multichannel_layout(int bins) {
  std::vector<std::string> layout;
  for (const char* pol : {"pos", "neg"}) {
    for (int b = 0; b < bins; ++b) {
      layout.push_back(bins == 1 ? std::string(pol) : std::string(pol) + "_b" + std::to_string(b));
    }
  }
  return layout;
}

/// Channels [pos_b0 .. pos_b(B-1), neg_b0 .. neg_b(B-1)].
inline EventHistogram event_histogram(const EventWindow& window, int bins) {
  if (bins < 1) throw std::invalid_argument("event_histogram: bins must be >= 1");
  const Geometry& g = window.geometry;
  EventHistogram h;
  h.bins = bins;
  h.geometry = g;
  h.counts.assign(static_cast<std::size_t>(2 * bins) * g.pixels(), 0);
  for (const Event& e : window.events) {
    validate_event(e, g);
    const int b = count_bin(e, window.t_start, window.t_end, bins);
    const int c = (e.p > 0 ? 0 : bins) + b;
    ++h.counts[static_cast<std::size_t>(c) * g.pixels() + static_cast<std::size_t>(e.y) * g.width +
               e.x];
  }
  return h;
}

/// Per-channel max normalization of a histogram; all-zero channels stay zero.
inline MultiChannelImage normalize(const EventHistogram& h) {
  MultiChannelImage img;
  img.geometry = h.geometry;
  img.channel_layout = multichannel_layout(h.bins);
  img.data.assign(h.counts.size(), 0.0f);
  const std::size_t plane = h.geometry.pixels();
  for (std::size_t c = 0; c < img.channel_layout.size(); ++c) {
    const auto first = h.counts.begin() + static_cast<std::ptrdiff_t>(c * plane);
    const std::uint32_t mx = plane == 0 ? 0 : *std::max_element(first, first + plane);
    if (mx == 0) continue;
    for (std::size_t i = 0; i < plane; ++i) {
      img.data[c * plane + i] = static_cast<float>(h.counts[c * plane + i]) / static_cast<float>(mx);
    }
  }
  return img;
}

inline MultiChannelImage to_multichannel(const EventWindow& window, int bins = 3) {
  return normalize(event_histogram(window, bins));
}

/// Two-channel positive/negative count frame.
inline MultiChannelImage to_count_frame(const EventWindow& window) {
  return to_multichannel(window, 1);
}

}  // namespace evd
