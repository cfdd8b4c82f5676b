// evd: corpus generation, encoding, training, evaluation and plots.
//
// Exit codes: 0 ok, 2 usage or parse error, 3 malformed binary input,
// 4 missing input, 5 configuration error, 6 training failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "evd/container.hpp"
#include "evd/engine.hpp"
#include "evd/errors.hpp"
#include "evd/event_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitMissing = 4;
constexpr int kExitConfig = 5;
constexpr int kExitTraining = 6;

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("no such file or directory: " + p.string());
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string text_hash(const std::string& s) {
  return evd::io::git_blob_hash({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                    const json& inputs, const json& extra = json::object()) {
  fs::create_directories(dir);
  json m = {{"tool", "evd"},   {"command", command}, {"argv", argv},
            {"inputs", inputs}, {"created_utc", utc_now()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  evd::io::write_json(dir / "manifest.json", m);
}

json hash_inputs(const std::vector<fs::path>& files) {
  json j = json::object();
  for (const auto& f : files) {
    if (fs::is_regular_file(f)) j[f.string()] = evd::io::git_blob_hash_file(f);
  }
  return j;
}

fs::path default_run_dir(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("EVD_RUN_DIR"); env && *env) return env;
  return "runs";
}

evd::config::Project load_project(const std::string& config_path, const std::vector<std::string>& sets) {
  if (config_path.empty()) return evd::config::parse("", sets);
  require_exists(config_path);
  return evd::config::load(config_path, sets);
}

evd::EventStream read_events(const fs::path& path, const std::string& unit) {
  require_exists(path);
  if (path.extension() == ".evs") return evd::read_evs1_file(path.string());
  evd::TextParseOptions opt;
  opt.unit = unit == "us" ? evd::TimeUnit::micros : evd::TimeUnit::seconds;
  return evd::parse_text_file(path.string(), opt);
}

void write_pgm(const fs::path& path, const torch::Tensor& img01) {
  const auto t = (img01.clamp(0, 1) * 255).round().to(torch::kUInt8).contiguous();
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << t.size(1) << " " << t.size(0) << "\n255\n";
  os.write(reinterpret_cast<const char*>(t.data_ptr<std::uint8_t>()), t.numel());
}

// Label maps rendered with a fixed palette.
void write_label_ppm(const fs::path& path, const torch::Tensor& labels) {
  static const unsigned char palette[][3] = {{0, 0, 0},     {230, 25, 75},  {60, 180, 75}, {0, 130, 200},
                                             {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};
  const auto l = labels.to(torch::kInt64).contiguous();
  std::ofstream os(path, std::ios::binary);
  os << "P6\n" << l.size(1) << " " << l.size(0) << "\n255\n";
  const auto* p = l.data_ptr<int64_t>();
  for (int64_t i = 0; i < l.numel(); ++i) {
    const auto& c = palette[static_cast<std::size_t>(p[i]) % 8];
    os.write(reinterpret_cast<const char*>(c), 3);
  }
}

json report_json(const evd::engine::EvalReport& r) {
  json iou = json::array();
  for (double v : r.iou.iou) iou.push_back(std::isnan(v) ? json(nullptr) : json(v));
  json j = {{"miou", r.iou.mean}, {"iou", iou}, {"score", r.score()}};
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  return j;
}

// ---------------------------------------------------------------------------

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "INI configuration file");
  cmd->add_option("--set", a.sets, "override, section.key=value (repeatable)");
}

int cmd_synth(const CommonArgs& a, const std::string& out, const std::vector<std::string>& argv) {
  const auto project = load_project(a.config, a.sets);
  const auto corpora = evd::synth::make_corpora(project.corpus);
  evd::io::save_corpora(corpora, project.corpus, out);
  auto m = evd::io::read_json(fs::path(out) / "manifest.json");
  m["command"] = {{"argv", argv}, {"config_hash", text_hash(evd::config::to_ini(project))},
                  {"created_utc", utc_now()}};
  evd::io::write_json(fs::path(out) / "manifest.json", m);
  std::cout << "wrote " << corpora.source.images.size() << " source frames, " << corpora.target.samples.size()
            << " target windows, " << corpora.eval.samples.size() << " eval windows to " << out << "\n";
  return 0;
}

struct EncodeArgs {
  std::string events;
  std::string unit = "s";
  std::string representation = "multichannel";
  int bins = 3;
  double window_ms = 50;
  std::int64_t anchor_us = -1;
  std::size_t count = 0;
  std::size_t anchor_index = 0;
  std::string out;
  std::string evs_out;
};

int cmd_encode(const EncodeArgs& a, const std::vector<std::string>& argv) {
  const auto stream = read_events(a.events, a.unit);
  if (!a.evs_out.empty()) {
    evd::write_evs1_file(a.evs_out, stream);
    std::cout << "wrote " << stream.events.size() << " events to " << a.evs_out << "\n";
  }
  if (a.out.empty()) return 0;
  evd::engine::DataConfig data;
  data.representation = evd::config::representation_from_string(a.representation);
  data.bins = a.bins;
  data.window_us = static_cast<std::int64_t>(std::llround(a.window_ms * 1000));
  evd::EventWindow w;
  if (a.count > 0) {
    w = evd::slice_by_count(stream, a.count, a.anchor_index == 0 ? stream.events.size() : a.anchor_index);
  } else {
    const std::int64_t anchor = a.anchor_us >= 0 ? a.anchor_us
                                                 : (stream.events.empty() ? 0 : stream.events.back().t + 1);
    w = evd::slice_by_time(stream, data.window_us, anchor);
  }
  const auto t = evd::engine::encode_window(w, data).contiguous();
  std::vector<std::int64_t> shape(t.sizes().begin(), t.sizes().end());
  evd::io::write_tensor_file(
      a.out, std::span<const float>(t.data_ptr<float>(), static_cast<std::size_t>(t.numel())), shape,
      {{"representation", a.representation}, {"bins", a.bins}, {"t_start", w.t_start}, {"t_end", w.t_end},
       {"events", w.events.size()}, {"short_window", w.short_window}});
  write_manifest(fs::path(a.out).parent_path().empty() ? fs::path(".") : fs::path(a.out).parent_path(), "encode",
                 argv, hash_inputs({a.events}));
  std::cout << "encoded " << w.events.size() << " events into " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string run_dir;
  std::vector<std::string> presets;
  std::vector<std::uint64_t> seeds;
  bool verbose = false;
};

int cmd_train(const CommonArgs& a, const TrainArgs& t, const std::vector<std::string>& argv) {
  using namespace evd::engine;
  const auto project = load_project(a.config, a.sets);
  require_exists(t.data);
  const fs::path run_dir = default_run_dir(t.run_dir);
  const DistillConfig base = project.distill;

  const auto source = to_tensors(evd::io::load_source(t.data));
  const auto target = encode_target(evd::io::load_target(t.data, "target"), base.data, base.has_aps());
  const EvalSet eval = make_eval_set(evd::io::load_target(t.data, "eval"), evd::io::load_sealed_labels(t.data, "eval"),
                                     base.data, base.has_aps());

  std::vector<std::string> presets = t.presets;
  if (presets.empty()) presets.push_back("");
  std::vector<std::uint64_t> seeds = t.seeds;
  if (seeds.empty()) seeds.push_back(base.optim.seed);

  // Validate every requested configuration before any training starts.
  std::map<std::string, DistillConfig> configs;
  for (const auto& p : presets) {
    DistillConfig c = base;
    if (!p.empty()) {
      try {
        c.toggles = preset(p);
      } catch (const std::invalid_argument& e) {
        throw evd::ConfigError(e.what());
      }
      if (!c.has_aps()) {
        c.toggles.use_s_aps = false;
        c.toggles.ml = false;
      }
    }
    c.validate();
    configs[p] = c;
  }

  json summary = json::object();
  for (const auto seed : seeds) {
    DistillConfig tc = base;
    tc.optim.seed = seed;
    TeacherResult teacher = [&] {
      try {
        return pretrain_teacher(source, tc);
      } catch (const evd::ConfigError&) {
        throw;
      } catch (const std::runtime_error& e) {
        throw TrainingFailure(e.what());
      }
    }();
    const fs::path seed_dir = run_dir / ("seed_" + std::to_string(seed));
    evd::ckpt::save_network(seed_dir / "teacher.evdc", teacher.network);
    std::cout << "seed " << seed << ": teacher held-out score " << teacher.heldout_score << " after "
              << teacher.steps << " steps\n";
    for (const auto& p : presets) {
      DistillConfig c = configs.at(p);
      c.optim.seed = seed;
      const std::string name = p.empty() ? "config" : p;
      const fs::path dir = seed_dir / name;
      fs::create_directories(dir);
      {
        std::ofstream os(dir / "config.ini");
        os << evd::config::to_ini(c);
      }
      RunOptions opt;
      opt.run_dir = dir;
      opt.verbose = t.verbose;
      const auto start = std::chrono::steady_clock::now();
      RunResult r;
      TrainState state = make_state(c, teacher.network);
      if (p == "events_aps") {
        r = baseline_events_aps_only(c, teacher.network, target, &eval, opt);
      } else {
        r = run(state, source, target, &eval, opt);
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      json entry = report_json(r.final);
      entry["seconds"] = secs;
      if (state.g_ts && p != "events_aps") {
        entry["teacher_on_reconstruction"] =
            report_json(evaluate_reconstruction(state.teacher->as<evd::models::TaskNet>(),
                                                state.g_ts->as<evd::models::Generator>(), eval, c.data.classes));
      }
      summary[name][std::to_string(seed)] = entry;
      std::cout << "seed " << seed << " " << std::setw(12) << name << ": score " << std::fixed
                << std::setprecision(4) << r.final.score() << " (" << std::setprecision(0) << secs << " s)\n"
                << std::defaultfloat << std::setprecision(6);
    }
  }
  for (auto& [name, per_seed] : summary.items()) {
    double sum = 0;
    int n = 0;
    for (auto& [seed, entry] : per_seed.items()) {
      if (seed == "mean") continue;
      sum += entry.at("score").get<double>();
      ++n;
    }
    per_seed["mean"] = n ? sum / n : 0.0;
  }
  evd::io::write_json(run_dir / "summary.json", summary);
  write_manifest(run_dir, "train", argv, hash_inputs({a.config, fs::path(t.data) / "manifest.json"}),
                 {{"config_hash", text_hash(evd::config::to_ini(project))}});
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& student, const std::string& data, const std::string& split,
             const std::string& out, const std::vector<std::string>& argv) {
  using namespace evd::engine;
  require_exists(student);
  require_exists(data);
  const DataConfig dc = exported_data_config(student);
  auto net = evd::ckpt::load_network(student);
  const bool with_aps = false;
  const EvalSet eval = make_eval_set(evd::io::load_target(data, split), evd::io::load_sealed_labels(data, split), dc,
                                     with_aps);
  const auto r = evaluate(net.as<evd::models::TaskNet>(), eval.inputs.events, eval.labels, dc.classes);
  const json j = report_json(r);
  std::cout << j.dump(2) << "\n";
  if (!out.empty()) {
    evd::io::write_json(fs::path(out) / "eval.json", j);
    write_manifest(out, "eval", argv, hash_inputs({student, fs::path(data) / "manifest.json"}));
  }
  return 0;
}

int cmd_reconstruct(const std::string& state_path, const std::string& data, const std::string& out, int count,
                    const std::vector<std::string>& argv) {
  using namespace evd::engine;
  require_exists(state_path);
  require_exists(data);
  TrainState s = load_state(state_path);
  if (!s.g_ts) throw evd::ConfigError("checkpoint was trained without reconstruction generators");
  const EvalSet eval = make_eval_set(evd::io::load_target(data, "eval"), evd::io::load_sealed_labels(data, "eval"),
                                     s.config.data, s.config.has_aps());
  auto& teacher = s.teacher->as<evd::models::TaskNet>();
  auto& g = s.g_ts->as<evd::models::Generator>();
  const auto r = evaluate_reconstruction(teacher, g, eval, s.config.data.classes);
  fs::create_directories(out);
  torch::NoGradGuard ng;
  const int n = std::min<int>(count, static_cast<int>(eval.inputs.size()));
  for (int i = 0; i < n; ++i) {
    const auto e = eval.inputs.events.slice(0, i, i + 1);
    const auto img = g->forward(e);
    std::ostringstream base;
    base << std::setw(4) << std::setfill('0') << i;
    write_pgm(fs::path(out) / (base.str() + "_recon.pgm"), img[0][0]);
    if (eval.inputs.aps.defined()) write_pgm(fs::path(out) / (base.str() + "_aps.pgm"), eval.inputs.aps[i][0]);
    write_label_ppm(fs::path(out) / (base.str() + "_teacher.ppm"), teacher->forward(img).logits.argmax(1)[0]);
  }
  const json j = {{"teacher_on_reconstruction", report_json(r)}, {"images", n}};
  evd::io::write_json(fs::path(out) / "reconstruction.json", j);
  write_manifest(out, "reconstruct", argv, hash_inputs({state_path, fs::path(data) / "manifest.json"}));
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_infer(const std::string& student, const EncodeArgs& a, const std::vector<std::string>& argv) {
  using namespace evd::engine;
  require_exists(student);
  const DataConfig dc = exported_data_config(student);
  const auto stream = read_events(a.events, a.unit);
  const std::int64_t anchor = a.anchor_us >= 0 ? a.anchor_us
                                               : (stream.events.empty() ? 0 : stream.events.back().t + 1);
  const auto x = encode_window(evd::slice_by_time(stream, dc.window_us, anchor), dc).unsqueeze(0);
  const auto logits = infer(fs::path(student), x);
  const auto pred = logits.argmax(1)[0];
  json hist = json::array();
  for (int k = 0; k < dc.classes; ++k) hist.push_back((pred == k).sum().item<int64_t>());
  if (!a.out.empty()) {
    write_label_ppm(a.out, pred);
    write_manifest(fs::path(a.out).parent_path().empty() ? fs::path(".") : fs::path(a.out).parent_path(), "infer",
                   argv, hash_inputs({student, a.events}));
  }
  std::cout << json{{"pixels_per_class", hist}}.dump() << "\n";
  return 0;
}

// Minimal SVG line charts of the eval score and total loss against step.
int cmd_plot(const std::string& run, const std::string& out, const std::vector<std::string>& argv) {
  const fs::path metrics = fs::path(run) / "metrics.jsonl";
  require_exists(metrics);
  std::vector<double> steps, score, loss;
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    steps.push_back(j.at("step").get<double>());
    score.push_back(j.value("miou", std::nan("")));
    loss.push_back(j.at("losses").value("total", std::nan("")));
  }
  if (steps.empty()) throw MissingInput(metrics.string() + " holds no records");
  const double w = 640, h = 240, pad = 40;
  auto panel = [&](std::ostream& os, const std::vector<double>& ys, double y0, const char* title, const char* color) {
    double lo = 1e300, hi = -1e300;
    for (double v : ys) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!(hi > lo)) hi = lo + 1;
    const double x0 = steps.front(), x1 = steps.back() > x0 ? steps.back() : x0 + 1;
    os << "<text x='" << pad << "' y='" << y0 + 16 << "' font-size='14'>" << title << " [" << lo << ", " << hi
       << "]</text>\n<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (!std::isfinite(ys[i])) continue;
      const double px = pad + (steps[i] - x0) / (x1 - x0) * (w - 2 * pad);
      const double py = y0 + h - pad - (ys[i] - lo) / (hi - lo) * (h - 2 * pad);
      os << px << "," << py << " ";
    }
    os << "'/>\n<rect x='" << pad << "' y='" << y0 + pad << "' width='" << w - 2 * pad << "' height='"
       << h - 2 * pad << "' fill='none' stroke='#888'/>\n";
  };
  std::ofstream os(out);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << 2 * h << "'>\n";
  panel(os, score, 0, "eval mIoU", "#1f77b4");
  panel(os, loss, h, "total loss", "#d62728");
  os << "</svg>\n";
  write_manifest(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path(), "plot", argv,
                 hash_inputs({metrics}));
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Event-camera cross-modal distillation toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string out, data, student, split = "eval", state, run;
  int count = 8;

  auto* synth = app.add_subcommand("synth", "generate labeled source / unlabeled target corpora");
  add_common(synth, common);
  synth->add_option("--out", out, "corpus directory")->required();

  EncodeArgs enc;
  auto* encode = app.add_subcommand("encode", "slice an event file and encode one window");
  encode->add_option("--events", enc.events, "event file (.evs or 't x y p' text)")->required();
  encode->add_option("--unit", enc.unit, "text timestamp unit: s or us")->check(CLI::IsMember({"s", "us"}));
  encode->add_option("--representation", enc.representation)
      ->check(CLI::IsMember({"multichannel", "voxel", "count2"}));
  encode->add_option("--bins", enc.bins)->check(CLI::PositiveNumber);
  encode->add_option("--window-ms", enc.window_ms)->check(CLI::PositiveNumber);
  encode->add_option("--anchor-us", enc.anchor_us, "window end (exclusive); default: after the last event");
  encode->add_option("--count", enc.count, "slice by event count instead of time");
  encode->add_option("--anchor-index", enc.anchor_index, "count slicing end index (exclusive)");
  encode->add_option("--out", enc.out, "tensor file (.evdt)");
  encode->add_option("--evs-out", enc.evs_out, "also write the stream as EVS1");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "pretrain the teacher and distill into the event student");
  add_common(train, common);
  train->add_option("--data", tr.data, "corpus directory")->required();
  train->add_option("--run-dir", tr.run_dir, "output directory (default: $EVD_RUN_DIR or ./runs)");
  train->add_option("--preset", tr.presets,
                    "toggle preset: PI, PI+AG, PI+AG+DM, full, no_bmr, ce_only, events_aps (repeatable)");
  train->add_option("--seed", tr.seeds, "seed (repeatable)");
  train->add_flag("--verbose", tr.verbose);

  auto* eval = app.add_subcommand("eval", "score an exported student on a corpus split");
  eval->add_option("--student", student)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"target", "eval"}));
  eval->add_option("--out", out, "directory for eval.json");

  auto* recon = app.add_subcommand("reconstruct", "render G(e) images and score the teacher on them");
  recon->add_option("--state", state, "training checkpoint")->required();
  recon->add_option("--data", data)->required();
  recon->add_option("--out", out)->required();
  recon->add_option("--count", count)->check(CLI::NonNegativeNumber);

  EncodeArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "segment one event window with an exported student");
  infer_cmd->add_option("--student", student)->required();
  infer_cmd->add_option("--events", inf.events)->required();
  infer_cmd->add_option("--unit", inf.unit)->check(CLI::IsMember({"s", "us"}));
  infer_cmd->add_option("--anchor-us", inf.anchor_us);
  infer_cmd->add_option("--out", inf.out, "label image (.ppm)");

  auto* plot = app.add_subcommand("plot", "SVG curves from a run's metrics.jsonl");
  plot->add_option("--run", run, "run directory")->required();
  plot->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(common, out, args);
    if (*encode) return cmd_encode(enc, args);
    if (*train) return cmd_train(common, tr, args);
    if (*eval) return cmd_eval(student, data, split, out, args);
    if (*recon) return cmd_reconstruct(state, data, out, count, args);
    if (*infer_cmd) return cmd_infer(student, inf, args);
    if (*plot) return cmd_plot(run, out, args);
  } catch (const evd::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const evd::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const MissingInput& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return kExitMissing;
  } catch (const evd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingFailure& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kExitTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTraining;
  }
  return 0;
}
