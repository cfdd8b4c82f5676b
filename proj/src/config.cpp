#include "evd/config.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "evd/errors.hpp"

namespace evd::config {
namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"run",
       {"mode", "seed", "steps", "batch_size", "lr", "beta1", "gan_beta1", "eval_every",
        "checkpoint_every", "adapt_teacher", "l1_aps_mode", "ce_through_generator", "preset"}},
      {"toggles", {"pi", "ag", "dm", "ml", "bmr", "use_s_aps"}},
      {"weights", {"lambda_da", "lambda_ag", "lambda_md", "tau", "sigma", "pixelwise", "cycle", "adversarial"}},
      {"model", {"base_width", "stages", "gen_width", "disc_width", "clf_width", "ag_tap", "da_tap",
                 "aggregation"}},
      {"data", {"representation", "bins", "window_ms", "classes"}},
      {"teacher", {"steps", "max_steps", "lr", "batch_size", "miou_floor", "heldout_fraction"}},
      {"synth",
       {"task", "canvas", "source_scenes", "target_scenes", "eval_scenes", "frames_per_scene",
        "frame_interval_us", "samples_per_scene", "window_ms", "contrast_threshold", "gamma",
        "contrast", "noise_sigma", "blur_px", "source_seed", "target_seed"}},
  };
  return s;
}

void check_known(const pt::ptree& tree) {
  for (const auto& [section, body] : tree) {
    const auto it = schema().find(section);
    if (it == schema().end()) throw ConfigError("unknown config section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!it->second.contains(key)) throw ConfigError("unknown config key " + section + "." + key);
    }
  }
}

void apply_override(pt::ptree& tree, const std::string& kv) {
  const auto eq = kv.find('=');
  const auto dot = kv.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
    throw ConfigError("override must look like section.key=value, got '" + kv + "'");
  }
  const std::string section = kv.substr(0, dot);
  const std::string key = kv.substr(dot + 1, eq - dot - 1);
  const auto it = schema().find(section);
  if (it == schema().end() || !it->second.contains(key)) {
    throw ConfigError("unknown config key " + section + "." + key);
  }
  // ptree paths use '.' as separator, which is exactly section.key.
  tree.put(section + "." + key, kv.substr(eq + 1));
}

class Reader {
 public:
  explicit Reader(const pt::ptree& t) : tree_(t) {}

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) const {
    const auto v = tree_.get_optional<std::string>(section + "." + key);
    if (!v) return;
    out = convert<T>(section + "." + key, *v);
  }

  [[nodiscard]] std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto v = tree_.get_optional<std::string>(section + "." + key);
    if (!v) return std::nullopt;
    return *v;
  }

 private:
  template <class T>
  static T convert(const std::string& name, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "off" || v == "no") return false;
      throw ConfigError(name + ": expected a boolean, got '" + v + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else {
      std::istringstream is(v);
      T out{};
      is >> out;
      if (!is || !(is >> std::ws).eof()) {
        throw ConfigError(name + ": cannot parse '" + v + "'");
      }
      if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(out)) throw ConfigError(name + ": value must be finite");
      }
      return out;
    }
  }

  const pt::ptree& tree_;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

const char* b(bool v) { return v ? "true" : "false"; }

}  // namespace

engine::Mode mode_from_string(const std::string& s) {
  using engine::Mode;
  for (Mode m : {Mode::segmentation_with_aps, Mode::segmentation_no_aps, Mode::recognition}) {
    if (s == engine::to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + s + "'");
}

engine::Representation representation_from_string(const std::string& s) {
  using engine::Representation;
  for (Representation r : {Representation::multichannel, Representation::voxel, Representation::count2}) {
    if (s == engine::to_string(r)) return r;
  }
  throw ConfigError("unknown representation '" + s + "'");
}

losses::Aggregation aggregation_from_string(const std::string& s) {
  if (s == "none") return losses::Aggregation::none;
  if (s == "mean") return losses::Aggregation::mean;
  if (s == "max") return losses::Aggregation::max;
  throw ConfigError("unknown aggregation '" + s + "'");
}

const char* to_string(losses::Aggregation a) {
  switch (a) {
    case losses::Aggregation::none: return "none";
    case losses::Aggregation::mean: return "mean";
    case losses::Aggregation::max: return "max";
  }
  return "mean";
}

Project parse(const std::string& ini_text, const std::vector<std::string>& overrides) {
  pt::ptree tree;
  try {
    std::istringstream is(ini_text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  check_known(tree);
  for (const auto& o : overrides) apply_override(tree, o);

  const Reader r(tree);
  Project p;
  auto& d = p.distill;

  if (auto m = r.raw("run", "mode")) d.mode = mode_from_string(*m);
  if (auto preset = r.raw("run", "preset")) {
    try {
      d.toggles = engine::preset(*preset);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  // Without APS frames there is no APS student and nothing to pair for mutual
  // learning; explicit requests for either are rejected by validate().
  if (!d.has_aps()) {
    d.toggles.use_s_aps = false;
    d.toggles.ml = false;
  }

  r.get("run", "seed", d.optim.seed);
  r.get("run", "steps", d.optim.steps);
  r.get("run", "batch_size", d.optim.batch_size);
  r.get("run", "lr", d.optim.lr);
  r.get("run", "beta1", d.optim.beta1);
  r.get("run", "gan_beta1", d.optim.gan_beta1);
  r.get("run", "eval_every", d.eval_every);
  r.get("run", "checkpoint_every", d.checkpoint_every);
  r.get("run", "adapt_teacher", d.adapt_teacher);
  r.get("run", "l1_aps_mode", d.l1_aps_mode);
  r.get("run", "ce_through_generator", d.ce_through_generator);

  r.get("toggles", "pi", d.toggles.pi);
  r.get("toggles", "ag", d.toggles.ag);
  r.get("toggles", "dm", d.toggles.dm);
  r.get("toggles", "ml", d.toggles.ml);
  r.get("toggles", "bmr", d.toggles.bmr);
  r.get("toggles", "use_s_aps", d.toggles.use_s_aps);

  r.get("weights", "lambda_da", d.weights.lambda_da);
  r.get("weights", "lambda_ag", d.weights.lambda_ag);
  r.get("weights", "lambda_md", d.weights.lambda_md);
  r.get("weights", "tau", d.weights.tau);
  r.get("weights", "sigma", d.weights.sigma);
  r.get("weights", "pixelwise", d.weights.pixelwise);
  r.get("weights", "cycle", d.weights.cycle);
  r.get("weights", "adversarial", d.weights.adversarial);

  r.get("model", "base_width", d.model.base_width);
  r.get("model", "stages", d.model.stages);
  r.get("model", "gen_width", d.model.gen_width);
  r.get("model", "disc_width", d.model.disc_width);
  r.get("model", "clf_width", d.model.clf_width);
  r.get("model", "ag_tap", d.model.ag_tap);
  r.get("model", "da_tap", d.model.da_tap);
  if (auto a = r.raw("model", "aggregation")) d.model.aggregation = aggregation_from_string(*a);

  if (auto rep = r.raw("data", "representation")) d.data.representation = representation_from_string(*rep);
  r.get("data", "bins", d.data.bins);
  double window_ms = static_cast<double>(d.data.window_us) / 1000.0;
  r.get("data", "window_ms", window_ms);
  d.data.window_us = static_cast<std::int64_t>(std::llround(window_ms * 1000.0));
  r.get("data", "classes", d.data.classes);

  r.get("teacher", "steps", d.teacher.steps);
  r.get("teacher", "max_steps", d.teacher.max_steps);
  r.get("teacher", "lr", d.teacher.lr);
  r.get("teacher", "batch_size", d.teacher.batch_size);
  r.get("teacher", "miou_floor", d.teacher.miou_floor);
  r.get("teacher", "heldout_fraction", d.teacher.heldout_fraction);

  auto& c = p.corpus;
  c.task = d.mode == engine::Mode::recognition ? synth::Task::recognition : synth::Task::segmentation;
  if (auto t = r.raw("synth", "task")) {
    if (*t == "segmentation") c.task = synth::Task::segmentation;
    else if (*t == "recognition") c.task = synth::Task::recognition;
    else throw ConfigError("unknown synth.task '" + *t + "'");
  }
  if (auto cv = r.raw("synth", "canvas")) {
    const auto x = cv->find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument("no 'x'");
      c.canvas = Geometry{std::stoi(cv->substr(0, x)), std::stoi(cv->substr(x + 1))};
    } catch (const std::exception&) {
      throw ConfigError("synth.canvas must look like WxH, got '" + *cv + "'");
    }
  }
  r.get("synth", "source_scenes", c.source_scenes);
  r.get("synth", "target_scenes", c.target_scenes);
  r.get("synth", "eval_scenes", c.eval_scenes);
  r.get("synth", "frames_per_scene", c.frames_per_scene);
  r.get("synth", "frame_interval_us", c.frame_interval_us);
  r.get("synth", "samples_per_scene", c.samples_per_scene);
  c.window_us = d.data.window_us;
  double synth_window_ms = static_cast<double>(c.window_us) / 1000.0;
  r.get("synth", "window_ms", synth_window_ms);
  c.window_us = static_cast<std::int64_t>(std::llround(synth_window_ms * 1000.0));
  r.get("synth", "contrast_threshold", c.simulator.contrast_threshold);
  r.get("synth", "gamma", c.degradation.gamma);
  r.get("synth", "contrast", c.degradation.contrast);
  r.get("synth", "noise_sigma", c.degradation.noise_sigma);
  r.get("synth", "blur_px", c.degradation.blur_px);
  r.get("synth", "source_seed", c.source_seed);
  r.get("synth", "target_seed", c.target_seed);

  d.validate();
  if (c.source_seed == c.target_seed) throw ConfigError("synth.source_seed and synth.target_seed must differ");
  if (c.canvas.width <= 0 || c.canvas.height <= 0) throw ConfigError("synth.canvas must be positive");
  if (c.source_scenes < 1 || c.target_scenes < 1 || c.eval_scenes < 1) {
    throw ConfigError("synth scene counts must be >= 1");
  }
  if (c.simulator.contrast_threshold <= 0) throw ConfigError("synth.contrast_threshold must be > 0");
  return p;
}

Project load(const std::filesystem::path& ini_file, const std::vector<std::string>& overrides) {
  std::ifstream in(ini_file);
  if (!in) throw ConfigError("cannot open config " + ini_file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), overrides);
}

std::string to_ini(const engine::DistillConfig& d) {
  std::ostringstream os;
  os << "[run]\n"
     << "mode = " << engine::to_string(d.mode) << "\n"
     << "seed = " << d.optim.seed << "\n"
     << "steps = " << d.optim.steps << "\n"
     << "batch_size = " << d.optim.batch_size << "\n"
     << "lr = " << fmt(d.optim.lr) << "\n"
     << "beta1 = " << fmt(d.optim.beta1) << "\n"
     << "gan_beta1 = " << fmt(d.optim.gan_beta1) << "\n"
     << "eval_every = " << d.eval_every << "\n"
     << "checkpoint_every = " << d.checkpoint_every << "\n"
     << "adapt_teacher = " << b(d.adapt_teacher) << "\n"
     << "l1_aps_mode = " << b(d.l1_aps_mode) << "\n"
     << "ce_through_generator = " << b(d.ce_through_generator) << "\n\n"
     << "[toggles]\n"
     << "pi = " << b(d.toggles.pi) << "\n"
     << "ag = " << b(d.toggles.ag) << "\n"
     << "dm = " << b(d.toggles.dm) << "\n"
     << "ml = " << b(d.toggles.ml) << "\n"
     << "bmr = " << b(d.toggles.bmr) << "\n"
     << "use_s_aps = " << b(d.toggles.use_s_aps) << "\n\n"
     << "[weights]\n"
     << "lambda_da = " << fmt(d.weights.lambda_da) << "\n"
     << "lambda_ag = " << fmt(d.weights.lambda_ag) << "\n"
     << "lambda_md = " << fmt(d.weights.lambda_md) << "\n"
     << "tau = " << fmt(d.weights.tau) << "\n"
     << "sigma = " << d.weights.sigma << "\n"
     << "pixelwise = " << fmt(d.weights.pixelwise) << "\n"
     << "cycle = " << fmt(d.weights.cycle) << "\n"
     << "adversarial = " << fmt(d.weights.adversarial) << "\n\n"
     << "[model]\n"
     << "base_width = " << d.model.base_width << "\n"
     << "stages = " << d.model.stages << "\n"
     << "gen_width = " << d.model.gen_width << "\n"
     << "disc_width = " << d.model.disc_width << "\n"
     << "clf_width = " << d.model.clf_width << "\n";
  if (!d.model.ag_tap.empty()) os << "ag_tap = " << d.model.ag_tap << "\n";
  if (!d.model.da_tap.empty()) os << "da_tap = " << d.model.da_tap << "\n";
  os << "aggregation = " << to_string(d.model.aggregation) << "\n\n"
     << "[data]\n"
     << "representation = " << engine::to_string(d.data.representation) << "\n"
     << "bins = " << d.data.bins << "\n"
     << "window_ms = " << fmt(static_cast<double>(d.data.window_us) / 1000.0) << "\n"
     << "classes = " << d.data.classes << "\n\n"
     << "[teacher]\n"
     << "steps = " << d.teacher.steps << "\n"
     << "max_steps = " << d.teacher.max_steps << "\n"
     << "lr = " << fmt(d.teacher.lr) << "\n"
     << "batch_size = " << d.teacher.batch_size << "\n"
     << "miou_floor = " << fmt(d.teacher.miou_floor) << "\n"
     << "heldout_fraction = " << fmt(d.teacher.heldout_fraction) << "\n";
  return os.str();
}

std::string to_ini(const Project& p) {
  const auto& c = p.corpus;
  std::ostringstream os;
  os << to_ini(p.distill) << "\n[synth]\n"
     << "task = " << (c.task == synth::Task::recognition ? "recognition" : "segmentation") << "\n"
     << "canvas = " << c.canvas.width << "x" << c.canvas.height << "\n"
     << "source_scenes = " << c.source_scenes << "\n"
     << "target_scenes = " << c.target_scenes << "\n"
     << "eval_scenes = " << c.eval_scenes << "\n"
     << "frames_per_scene = " << c.frames_per_scene << "\n"
     << "frame_interval_us = " << c.frame_interval_us << "\n"
     << "samples_per_scene = " << c.samples_per_scene << "\n"
     << "window_ms = " << fmt(static_cast<double>(c.window_us) / 1000.0) << "\n"
     << "contrast_threshold = " << fmt(c.simulator.contrast_threshold) << "\n"
     << "gamma = " << fmt(c.degradation.gamma) << "\n"
     << "contrast = " << fmt(c.degradation.contrast) << "\n"
     << "noise_sigma = " << fmt(c.degradation.noise_sigma) << "\n"
     << "blur_px = " << c.degradation.blur_px << "\n"
     << "source_seed = " << c.source_seed << "\n"
     << "target_seed = " << c.target_seed << "\n";
  return os.str();
}

}  // namespace evd::config
