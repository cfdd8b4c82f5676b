#include "evd/container.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "evd/errors.hpp"
#include "evd/event_io.hpp"

namespace evd::io {
namespace fs = std::filesystem;

std::int64_t TensorFile::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

template <class T>
void write_impl(const fs::path& path, std::span<const T> data, const std::vector<std::int64_t>& shape,
                const nlohmann::json& meta, const char* dtype) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= d;
  }
  if (n != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor shape does not match data size");
  }
  nlohmann::json header{{"dtype", dtype}, {"shape", shape}, {"meta", meta}};
  const std::string h = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("EVDT", 4);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const T& v : data) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, sizeof(bits));
    detail::put_le<std::uint32_t>(os, bits);
  }
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_tensor_file(const fs::path& path, std::span<const float> data,
                       const std::vector<std::int64_t>& shape, const nlohmann::json& meta) {
  write_impl(path, data, shape, meta, "f32");
}

void write_tensor_file(const fs::path& path, std::span<const std::int32_t> data,
                       const std::vector<std::int64_t>& shape, const nlohmann::json& meta) {
  write_impl(path, data, shape, meta, "i32");
}

TensorFile read_tensor_file(const fs::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "EVDT", 4) != 0) {
    throw FormatError(FormatErrc::bad_magic, path.string());
  }
  const auto hlen = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) {
    throw FormatError(FormatErrc::truncated, path.string());
  }
  TensorFile tf;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
    tf.dtype = header.at("dtype").get<std::string>();
    tf.shape = header.at("shape").get<std::vector<std::int64_t>>();
    tf.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrc::bad_header, path.string() + ": " + e.what());
  }
  if (tf.dtype != "f32" && tf.dtype != "i32") {
    throw FormatError(FormatErrc::bad_header, "unknown dtype " + tf.dtype);
  }
  const std::size_t n = static_cast<std::size_t>(tf.numel());
  const std::size_t payload = bytes.size() - 8 - hlen;
  if (payload != n * 4) {
    throw FormatError(payload < n * 4 ? FormatErrc::truncated : FormatErrc::count_mismatch,
                      path.string() + ": expected " + std::to_string(n * 4) + " payload bytes, got " +
                          std::to_string(payload));
  }
  const unsigned char* p = bytes.data() + 8 + hlen;
  if (tf.dtype == "f32") {
    tf.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = detail::get_le<std::uint32_t>(p + 4 * i);
      std::memcpy(&tf.f32[i], &bits, 4);
    }
  } else {
    tf.i32.resize(n);
    for (std::size_t i = 0; i < n; ++i) tf.i32[i] = detail::get_le<std::int32_t>(p + 4 * i);
  }
  return tf;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrc::bad_header, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

namespace {

nlohmann::json family_json(const synth::SceneFamily& f) {
  return {{"min_shapes", f.min_shapes},       {"max_shapes", f.max_shapes},
          {"min_size", f.min_size},           {"max_size", f.max_size},
          {"min_speed", f.min_speed},         {"max_speed", f.max_speed},
          {"min_intensity", f.min_intensity}, {"max_intensity", f.max_intensity},
          {"min_background", f.min_background}, {"max_background", f.max_background},
          {"texture", f.texture},             {"background_texture", f.background_texture}};
}

void save_images(const fs::path& path, const std::vector<synth::Image>& images, Geometry g) {
  std::vector<float> flat;
  flat.reserve(images.size() * g.pixels());
  for (const auto& im : images) flat.insert(flat.end(), im.pixels.begin(), im.pixels.end());
  write_tensor_file(path, std::span<const float>(flat),
                    {static_cast<std::int64_t>(images.size()), g.height, g.width});
}

void save_masks(const fs::path& path, const std::vector<synth::LabelMask>& masks, Geometry g) {
  std::vector<std::int32_t> flat;
  flat.reserve(masks.size() * g.pixels());
  for (const auto& m : masks) flat.insert(flat.end(), m.ids.begin(), m.ids.end());
  write_tensor_file(path, std::span<const std::int32_t>(flat),
                    {static_cast<std::int64_t>(masks.size()), g.height, g.width},
                    {{"kind", "masks"}});
}

void save_classes(const fs::path& path, const std::vector<int>& classes) {
  std::vector<std::int32_t> flat(classes.begin(), classes.end());
  write_tensor_file(path, std::span<const std::int32_t>(flat),
                    {static_cast<std::int64_t>(classes.size())}, {{"kind", "classes"}});
}

std::vector<synth::Image> load_images(const fs::path& path) {
  const auto tf = read_tensor_file(path);
  if (tf.dtype != "f32" || tf.shape.size() != 3) {
    throw FormatError(FormatErrc::bad_header, path.string() + ": expected f32 [N,H,W]");
  }
  const Geometry g{static_cast<int>(tf.shape[2]), static_cast<int>(tf.shape[1])};
  std::vector<synth::Image> out(static_cast<std::size_t>(tf.shape[0]));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].geometry = g;
    out[i].pixels.assign(tf.f32.begin() + static_cast<std::ptrdiff_t>(i * g.pixels()),
                         tf.f32.begin() + static_cast<std::ptrdiff_t>((i + 1) * g.pixels()));
  }
  return out;
}

/// Masks [N,H,W] or classes [N].
void load_labels(const fs::path& path, std::vector<synth::LabelMask>& masks, std::vector<int>& classes) {
  const auto tf = read_tensor_file(path);
  if (tf.dtype != "i32") throw FormatError(FormatErrc::bad_header, path.string() + ": expected i32");
  if (tf.shape.size() == 1) {
    classes.assign(tf.i32.begin(), tf.i32.end());
    return;
  }
  if (tf.shape.size() != 3) throw FormatError(FormatErrc::bad_header, path.string());
  const Geometry g{static_cast<int>(tf.shape[2]), static_cast<int>(tf.shape[1])};
  masks.resize(static_cast<std::size_t>(tf.shape[0]));
  for (std::size_t i = 0; i < masks.size(); ++i) {
    masks[i].geometry = g;
    masks[i].ids.assign(tf.i32.begin() + static_cast<std::ptrdiff_t>(i * g.pixels()),
                        tf.i32.begin() + static_cast<std::ptrdiff_t>((i + 1) * g.pixels()));
  }
}

void save_target(const fs::path& dir, const synth::TargetCorpus& t, const synth::SealedLabels& labels,
                 const fs::path& sealed_path) {
  fs::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  std::vector<synth::Image> aps;
  for (const auto& s : t.samples) {
    samples.push_back({{"scene", s.scene}, {"anchor_us", s.anchor_us}});
    aps.push_back(s.aps);
  }
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < t.streams.size(); ++i) {
    std::ostringstream name;
    name << "scene_" << std::setw(5) << std::setfill('0') << i << ".evs";
    write_evs1_file((dir / name.str()).string(), t.streams[i]);
    scenes.push_back({{"file", name.str()}, {"seed", t.scene_seeds[i]}});
  }
  write_json(dir / "samples.json", {{"window_us", t.window_us},
                                    {"width", t.geometry.width},
                                    {"height", t.geometry.height},
                                    {"scenes", scenes},
                                    {"samples", samples}});
  save_images(dir / "aps.evdt", aps, t.geometry);
  if (labels.task == synth::Task::recognition) {
    save_classes(sealed_path, labels.classes);
  } else {
    save_masks(sealed_path, labels.masks, t.geometry);
  }
}

}  // namespace

nlohmann::json to_json(const synth::CorpusOptions& o) {
  return {{"task", o.task == synth::Task::recognition ? "recognition" : "segmentation"},
          {"width", o.canvas.width},
          {"height", o.canvas.height},
          {"source_scenes", o.source_scenes},
          {"target_scenes", o.target_scenes},
          {"eval_scenes", o.eval_scenes},
          {"frames_per_scene", o.frames_per_scene},
          {"frame_interval_us", o.frame_interval_us},
          {"samples_per_scene", o.samples_per_scene},
          {"window_us", o.window_us},
          {"contrast_threshold", o.simulator.contrast_threshold},
          {"epsilon", o.simulator.epsilon},
          {"degradation",
           {{"gamma", o.degradation.gamma},
            {"contrast", o.degradation.contrast},
            {"noise_sigma", o.degradation.noise_sigma},
            {"blur_px", o.degradation.blur_px}}},
          {"source_family", family_json(o.source_family)},
          {"target_family", family_json(o.target_family)},
          {"source_seed", o.source_seed},
          {"target_seed", o.target_seed}};
}

void save_corpora(const synth::Corpora& c, const synth::CorpusOptions& opt, const fs::path& dir) {
  fs::create_directories(dir / "source");
  fs::create_directories(dir / "sealed");
  save_images(dir / "source" / "images.evdt", c.source.images, opt.canvas);
  if (opt.task == synth::Task::recognition) {
    save_classes(dir / "source" / "labels.evdt", c.source.classes);
  } else {
    save_masks(dir / "source" / "labels.evdt", c.source.masks, opt.canvas);
  }
  save_target(dir / "target", c.target, c.target_labels, dir / "sealed" / "target_labels.evdt");
  save_target(dir / "eval", c.eval, c.eval_labels, dir / "sealed" / "eval_labels.evdt");
  write_json(dir / "manifest.json",
             {{"format", "evd-corpus"},
              {"version", 1},
              {"options", to_json(opt)},
              {"counts",
               {{"source", c.source.images.size()},
                {"target", c.target.samples.size()},
                {"eval", c.eval.samples.size()}}}});
}

synth::SourceCorpus load_source(const fs::path& dir) {
  synth::SourceCorpus s;
  s.images = load_images(dir / "source" / "images.evdt");
  load_labels(dir / "source" / "labels.evdt", s.masks, s.classes);
  return s;
}

synth::TargetCorpus load_target(const fs::path& dir, const std::string& split) {
  if (split != "target" && split != "eval") throw std::invalid_argument("unknown split " + split);
  const fs::path sd = dir / split;
  const auto j = read_json(sd / "samples.json");
  synth::TargetCorpus t;
  t.window_us = j.at("window_us").get<std::int64_t>();
  t.geometry = Geometry{j.at("width").get<int>(), j.at("height").get<int>()};
  for (const auto& sc : j.at("scenes")) {
    t.streams.push_back(read_evs1_file((sd / sc.at("file").get<std::string>()).string()));
    t.scene_seeds.push_back(sc.at("seed").get<std::uint64_t>());
  }
  auto aps = load_images(sd / "aps.evdt");
  const auto& samples = j.at("samples");
  if (samples.size() != aps.size()) {
    throw FormatError(FormatErrc::count_mismatch, split + ": samples and APS frames differ");
  }
  for (std::size_t i = 0; i < aps.size(); ++i) {
    synth::TargetSample s;
    s.scene = samples[i].at("scene").get<std::size_t>();
    s.anchor_us = samples[i].at("anchor_us").get<std::int64_t>();
    if (s.scene >= t.streams.size()) throw FormatError(FormatErrc::bad_record, "scene index");
    s.aps = std::move(aps[i]);
    t.samples.push_back(std::move(s));
  }
  return t;
}

synth::SealedLabels load_sealed_labels(const fs::path& dir, const std::string& split) {
  if (split != "target" && split != "eval") throw std::invalid_argument("unknown split " + split);
  synth::SealedLabels l;
  load_labels(dir / "sealed" / (split + "_labels.evdt"), l.masks, l.classes);
  l.task = l.masks.empty() && !l.classes.empty() ? synth::Task::recognition : synth::Task::segmentation;
  return l;
}

std::string git_blob_hash(std::span<const unsigned char> content) {
  const std::string prefix = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, prefix.data(), prefix.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return os.str();
}

std::string git_blob_hash_file(const fs::path& path) {
  const auto bytes = slurp(path);
  return git_blob_hash(bytes);
}

}  // namespace evd::io
