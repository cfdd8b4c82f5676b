#pragma once

// Reference "t x y p" text parser and the EVS1 binary interchange codec.
//
// EVS1 layout (little-endian): "EVS1", u16 width, u16 height, u64 count, then
// count records of {u64 t, u16 x, u16 y, i8 p, 3 zero pad bytes} = 16 bytes each.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "evd/errors.hpp"
#include "evd/event_core.hpp"

namespace evd {

enum class TimeUnit { seconds, micros };

struct TextParseOptions {
  TimeUnit unit = TimeUnit::seconds;
  std::optional<Geometry> geometry;  // overrides any header line
  bool sort = false;                 // stable-sort instead of rejecting inversions
};

namespace detail {

inline bool parse_int64(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  const char* b = s.data();
  if (*b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

/// Exact decimal seconds -> microseconds with round-half-even on the 7th+ digits.
inline bool seconds_to_micros(std::string_view s, std::int64_t& out) {
  if (s.empty() || s.front() == '-') return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto dot = s.find('.');
  const std::string_view ip = s.substr(0, dot);
  std::string_view fp = dot == std::string_view::npos ? std::string_view{} : s.substr(dot + 1);
  if (ip.empty() && fp.empty()) return false;
  std::int64_t whole = 0;
  if (!ip.empty() && !parse_int64(ip, whole)) return false;
  for (char c : fp) {
    if (c < '0' || c > '9') return false;
  }
  std::int64_t frac = 0;
  for (std::size_t i = 0; i < 6; ++i) frac = frac * 10 + (i < fp.size() ? fp[i] - '0' : 0);
  std::int64_t us = whole * 1'000'000 + frac;
  if (fp.size() > 6) {
    const std::string_view rest = fp.substr(6);
    const bool above_half =
        rest[0] > '5' || (rest[0] == '5' && rest.find_first_not_of('0', 1) != std::string_view::npos);
    const bool exactly_half =
        rest[0] == '5' && rest.find_first_not_of('0', 1) == std::string_view::npos;
    if (above_half || (exactly_half && (us % 2 != 0))) ++us;
  }
  out = us;
  return true;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t b = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

template <class T>
void put_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> buf{};
  auto u = static_cast<std::make_unsigned_t<T>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  os.write(buf.data(), sizeof(T));
}

template <class T>
T get_le(const unsigned char* p) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(p[i]) << (8 * i);
  }
  return static_cast<T>(u);
}

}  // namespace detail

/// Parses a "t x y p" event dump. Blank lines and '#' comments are skipped. A
/// leading line with exactly two integers is read as "width height". Without a
/// header or explicit geometry, the geometry is inferred from the coordinates.
inline EventStream parse_text(std::istream& in, const TextParseOptions& opt = {}) {
  EventStream s;
  std::optional<Geometry> header;
  std::vector<std::size_t> line_of;
  std::string line;
  std::size_t lineno = 0;
  bool seen_data = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string_view body = std::string_view(line).substr(0, hash);
    const auto f = detail::split_ws(body);
    if (f.empty()) continue;
    if (!seen_data && !header && f.size() == 2) {
      std::int64_t w = 0;
      std::int64_t h = 0;
      if (!detail::parse_int64(f[0], w) || !detail::parse_int64(f[1], h) || w <= 0 || h <= 0 ||
          w > 65535 || h > 65535) {
        throw ParseError(lineno, "invalid geometry header");
      }
      header = Geometry{static_cast<int>(w), static_cast<int>(h)};
      continue;
    }
    seen_data = true;
    if (f.size() != 4) {
      throw ParseError(lineno, "expected 4 fields (t x y p), got " + std::to_string(f.size()));
    }
    Event e;
    std::int64_t t = 0;
    const bool t_ok = opt.unit == TimeUnit::seconds ? detail::seconds_to_micros(f[0], t)
                                                    : detail::parse_int64(f[0], t) && t >= 0;
    if (!t_ok) throw ParseError(lineno, "invalid timestamp '" + std::string(f[0]) + "'");
    std::int64_t x = 0;
    std::int64_t y = 0;
    std::int64_t p = 0;
    if (!detail::parse_int64(f[1], x) || x < 0 || x > 65535) {
      throw ParseError(lineno, "invalid x '" + std::string(f[1]) + "'");
    }
    if (!detail::parse_int64(f[2], y) || y < 0 || y > 65535) {
      throw ParseError(lineno, "invalid y '" + std::string(f[2]) + "'");
    }
    if (!detail::parse_int64(f[3], p) || p < -1 || p > 1) {
      throw ParseError(lineno, "polarity must be in {-1, 0, 1}, got '" + std::string(f[3]) + "'");
    }
    e.t = t;
    e.x = static_cast<std::int32_t>(x);
    e.y = static_cast<std::int32_t>(y);
    e.p = p == 1 ? std::int8_t{1} : std::int8_t{-1};
    s.events.push_back(e);
    line_of.push_back(lineno);
  }
  if (opt.geometry) {
    s.geometry = *opt.geometry;
  } else if (header) {
    s.geometry = *header;
  } else {
    for (const Event& e : s.events) {
      s.geometry.width = std::max(s.geometry.width, e.x + 1);
      s.geometry.height = std::max(s.geometry.height, e.y + 1);
    }
  }
  for (std::size_t i = 0; i < s.events.size(); ++i) {
    const Event& e = s.events[i];
    if (e.x >= s.geometry.width || e.y >= s.geometry.height) {
      throw ParseError(line_of[i], "coordinate outside " + std::to_string(s.geometry.width) + "x" +
                                       std::to_string(s.geometry.height));
    }
  }
  const std::size_t inv = first_inversion(s.events);
  if (inv != s.events.size()) {
    if (!opt.sort) throw ParseError(line_of[inv], "timestamp decreases (event index " +
                                                      std::to_string(inv) + ")");
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
  }
  return s;
}

inline EventStream parse_text_file(const std::string& path, const TextParseOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_text(in, opt);
}

inline constexpr std::size_t kEvs1HeaderBytes = 16;
inline constexpr std::size_t kEvs1RecordBytes = 16;

inline void write_evs1(std::ostream& os, const EventStream& s) {
  if (s.geometry.width <= 0 || s.geometry.height <= 0 || s.geometry.width > 65535 ||
      s.geometry.height > 65535) {
    throw std::invalid_argument("EVS1 geometry must be within 1..65535");
  }
  require_sorted(s.events);
  os.write("EVS1", 4);
  detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.geometry.width));
  detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.geometry.height));
  detail::put_le<std::uint64_t>(os, s.events.size());
  for (const Event& e : s.events) {
    validate_event(e, s.geometry);
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(e.t));
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.x));
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.y));
    detail::put_le<std::int8_t>(os, e.p);
    os.write("\0\0\0", 3);
  }
}

inline EventStream decode_evs1(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "EVS1", 4) != 0) {
    throw FormatError(FormatErrc::bad_magic, "expected 'EVS1'");
  }
  if (bytes.size() < kEvs1HeaderBytes) throw FormatError(FormatErrc::truncated, "short header");
  EventStream s;
  s.geometry.width = detail::get_le<std::uint16_t>(bytes.data() + 4);
  s.geometry.height = detail::get_le<std::uint16_t>(bytes.data() + 6);
  const auto count = detail::get_le<std::uint64_t>(bytes.data() + 8);
  const std::size_t payload = bytes.size() - kEvs1HeaderBytes;
  if (payload % kEvs1RecordBytes != 0) {
    throw FormatError(FormatErrc::truncated,
                      std::to_string(payload % kEvs1RecordBytes) + " trailing bytes");
  }
  const std::size_t present = payload / kEvs1RecordBytes;
  if (present != count) {
    throw FormatError(FormatErrc::count_mismatch, "header declares " + std::to_string(count) +
                                                      " records, " + std::to_string(present) +
                                                      " present");
  }
  s.events.resize(present);
  for (std::size_t i = 0; i < present; ++i) {
    const unsigned char* r = bytes.data() + kEvs1HeaderBytes + i * kEvs1RecordBytes;
    Event& e = s.events[i];
    const auto t = detail::get_le<std::uint64_t>(r);
    if (t > static_cast<std::uint64_t>(INT64_MAX)) {
      throw FormatError(FormatErrc::bad_record, "timestamp overflow at record " + std::to_string(i));
    }
    e.t = static_cast<std::int64_t>(t);
    e.x = detail::get_le<std::uint16_t>(r + 8);
    e.y = detail::get_le<std::uint16_t>(r + 10);
    e.p = detail::get_le<std::int8_t>(r + 12);
    if ((e.p != 1 && e.p != -1) || e.x >= s.geometry.width || e.y >= s.geometry.height) {
      throw FormatError(FormatErrc::bad_record, "record " + std::to_string(i));
    }
    if (i > 0 && e.t < s.events[i - 1].t) {
      throw FormatError(FormatErrc::unsorted, "record " + std::to_string(i));
    }
  }
  return s;
}

inline EventStream read_evs1(std::istream& in) {
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_evs1(bytes);
}

inline void write_evs1_file(const std::string& path, const EventStream& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_evs1(os, s);
}

inline EventStream read_evs1_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_evs1(in);
}

}  // namespace evd
