#include "evd/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "evd/errors.hpp"

namespace evd::engine {

using models::Network;
using models::Role;
using models::TaskNet;
using models::TaskOutput;
using nlohmann::json;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::segmentation_with_aps: return "segmentation_with_aps";
    case Mode::segmentation_no_aps: return "segmentation_no_aps";
    case Mode::recognition: return "recognition";
  }
  return "unknown";
}

const char* to_string(Representation r) {
  switch (r) {
    case Representation::multichannel: return "multichannel";
    case Representation::voxel: return "voxel";
    case Representation::count2: return "count2";
  }
  return "unknown";
}

Toggles preset(const std::string& name) {
  Toggles t;
  if (name == "PI") {
    t = {.pi = true, .ag = false, .dm = false, .ml = false, .bmr = true, .use_s_aps = false};
  } else if (name == "PI+AG") {
    t = {.pi = true, .ag = true, .dm = false, .ml = false, .bmr = true, .use_s_aps = false};
  } else if (name == "PI+AG+DM") {
    t = {.pi = true, .ag = true, .dm = true, .ml = false, .bmr = true, .use_s_aps = true};
  } else if (name == "PI+AG+DM+ML" || name == "full") {
    t = {.pi = true, .ag = true, .dm = true, .ml = true, .bmr = true, .use_s_aps = true};
  } else if (name == "no_bmr") {
    t = {.pi = true, .ag = true, .dm = true, .ml = true, .bmr = false, .use_s_aps = true};
  } else if (name == "ce_only") {
    t = {.pi = false, .ag = false, .dm = false, .ml = false, .bmr = true, .use_s_aps = false};
  } else if (name == "events_aps") {
    t = {.pi = false, .ag = true, .dm = true, .ml = false, .bmr = false, .use_s_aps = false};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return t;
}

void DistillConfig::validate() const {
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (optim.steps < 0) throw ConfigError("run.steps must be >= 0");
  if (optim.batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
  if (!(optim.lr > 0)) throw ConfigError("run.lr must be > 0");
  if (!(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.gan_beta1 >= 0 && optim.gan_beta1 < 1)) {
    throw ConfigError("Adam beta1 must lie in [0, 1)");
  }
  if (eval_every < 1) throw ConfigError("run.eval_every must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
  if (teacher.steps < 0 || teacher.max_steps < teacher.steps) {
    throw ConfigError("teacher.steps must be >= 0 and <= teacher.max_steps");
  }
  if (!(teacher.lr > 0) || teacher.batch_size < 1) throw ConfigError("teacher.lr and batch_size must be positive");
  if (!(teacher.heldout_fraction > 0 && teacher.heldout_fraction < 1)) {
    throw ConfigError("teacher.heldout_fraction must lie in (0, 1)");
  }
  if (data.classes < 2) throw ConfigError("data.classes must be >= 2");
  if (data.bins < 1) throw ConfigError("data.bins must be >= 1");
  if (data.window_us <= 0) throw ConfigError("data.window_ms must be > 0");
  if (data.image_channels < 1) throw ConfigError("image channels must be >= 1");
  if (model.base_width < 1 || model.gen_width < 1 || model.disc_width < 1 || model.clf_width < 1) {
    throw ConfigError("model widths must be >= 1");
  }
  if (model.stages < 2) throw ConfigError("model.stages must be >= 2");

  if (toggles.use_s_aps && !has_aps()) {
    throw ConfigError(std::string("mode ") + to_string(mode) +
                      " has no APS frames, so toggles.use_s_aps must be false");
  }
  if (toggles.ml && !toggles.use_s_aps) {
    throw ConfigError("toggles.ml needs the APS student (toggles.use_s_aps = true)");
  }
  if (!toggles.bmr && !has_aps()) {
    throw ConfigError("without reconstruction (toggles.bmr = false) the teacher needs APS frames");
  }
  if (l1_aps_mode && !(toggles.dm && toggles.use_s_aps)) {
    throw ConfigError("run.l1_aps_mode only applies with toggles.dm and toggles.use_s_aps");
  }
  if (!spatial() && model.ag_tap.rfind("dec", 0) == 0) {
    throw ConfigError("recognition networks have no decoder tap '" + model.ag_tap + "'");
  }
}

int DistillConfig::event_channels() const {
  switch (data.representation) {
    case Representation::multichannel: return data.bins == 1 ? 2 : 2 * data.bins;
    case Representation::voxel: return data.bins;
    case Representation::count2: return 2;
  }
  return 2 * data.bins;
}

std::string DistillConfig::resolved_da_tap() const {
  return model.da_tap.empty() ? "enc" + std::to_string(model.stages - 1) : model.da_tap;
}

std::string DistillConfig::resolved_ag_tap() const {
  if (!model.ag_tap.empty()) return model.ag_tap;
  return spatial() ? "dec0" : "enc" + std::to_string(model.stages - 1);
}

// ---------------------------------------------------------------------------
// Data

torch::Tensor encode_window(const EventWindow& w, const DataConfig& data) {
  const auto& g = w.geometry;
  switch (data.representation) {
    case Representation::multichannel:
    case Representation::count2: {
      const int bins = data.representation == Representation::count2 ? 1 : data.bins;
      const MultiChannelImage img = to_multichannel(w, bins);
      return torch::from_blob(const_cast<float*>(img.data.data()),
                              {img.channels(), g.height, g.width}, torch::kFloat32)
          .clone();
    }
    case Representation::voxel: {
      const VoxelGrid v = to_voxel_grid(w, data.bins);
      auto t = torch::from_blob(const_cast<double*>(v.data.data()), {v.bins, g.height, g.width},
                                torch::kFloat64)
                   .to(torch::kFloat32);
      const float m = t.abs().max().item<float>();
      return m > 0 ? t / m : t;
    }
  }
  throw std::invalid_argument("unknown representation");
}

namespace {

torch::Tensor image_tensor(const synth::Image& img) {
  return torch::from_blob(const_cast<float*>(img.pixels.data()),
                          {1, img.geometry.height, img.geometry.width}, torch::kFloat32)
      .clone();
}

torch::Tensor mask_tensor(const synth::LabelMask& m) {
  std::vector<std::int64_t> ids(m.ids.begin(), m.ids.end());
  return torch::tensor(ids, torch::kInt64).reshape({m.geometry.height, m.geometry.width});
}

}  // namespace

TargetTensors encode_target(const synth::TargetCorpus& corpus, const DataConfig& data, bool with_aps) {
  TargetTensors out;
  std::vector<torch::Tensor> ev;
  std::vector<torch::Tensor> aps;
  ev.reserve(corpus.samples.size());
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    ev.push_back(encode_window(corpus.window(i, data.window_us), data));
    if (with_aps) aps.push_back(image_tensor(corpus.samples[i].aps));
  }
  if (!ev.empty()) out.events = torch::stack(ev);
  if (with_aps && !aps.empty()) out.aps = torch::stack(aps);
  return out;
}

SourceTensors to_tensors(const synth::SourceCorpus& corpus) {
  SourceTensors out;
  std::vector<torch::Tensor> imgs;
  for (const auto& im : corpus.images) imgs.push_back(image_tensor(im));
  if (!imgs.empty()) out.images = torch::stack(imgs);
  if (!corpus.masks.empty()) {
    std::vector<torch::Tensor> m;
    for (const auto& mk : corpus.masks) m.push_back(mask_tensor(mk));
    out.labels = torch::stack(m);
  } else {
    std::vector<std::int64_t> c(corpus.classes.begin(), corpus.classes.end());
    out.labels = torch::tensor(c, torch::kInt64);
  }
  if (out.labels.size(0) != out.size()) throw std::invalid_argument("source corpus: label count mismatch");
  return out;
}

EvalSet make_eval_set(const synth::TargetCorpus& corpus, const synth::SealedLabels& labels,
                      const DataConfig& data, bool with_aps) {
  EvalSet e;
  e.inputs = encode_target(corpus, data, with_aps);
  if (labels.task == synth::Task::segmentation) {
    std::vector<torch::Tensor> m;
    for (const auto& mk : labels.masks) m.push_back(mask_tensor(mk));
    e.labels = torch::stack(m);
  } else {
    std::vector<std::int64_t> c(labels.classes.begin(), labels.classes.end());
    e.labels = torch::tensor(c, torch::kInt64);
  }
  if (e.labels.size(0) != e.inputs.size()) throw std::invalid_argument("eval set: label count mismatch");
  return e;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

constexpr int64_t kEvalChunk = 64;

EvalReport score(const torch::Tensor& pred, const torch::Tensor& labels, int classes, int ignore_index) {
  const auto p = pred.to(torch::kInt32).contiguous();
  const auto g = labels.to(torch::kInt32).contiguous();
  const std::span<const int> ps(p.data_ptr<int>(), static_cast<std::size_t>(p.numel()));
  const std::span<const int> gs(g.data_ptr<int>(), static_cast<std::size_t>(g.numel()));
  EvalReport r;
  r.confusion = confusion(ps, gs, classes, ignore_index);
  r.iou = miou(r.confusion);
  if (labels.dim() == 1) r.accuracy = accuracy(ps, gs);
  return r;
}

}  // namespace

EvalReport evaluate(TaskNet& net, const torch::Tensor& inputs, const torch::Tensor& labels, int classes,
                    int ignore_index) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> preds;
  for (int64_t i = 0; i < inputs.size(0); i += kEvalChunk) {
    const auto chunk = inputs.slice(0, i, std::min(i + kEvalChunk, inputs.size(0)));
    preds.push_back(net->forward(chunk).logits.argmax(1));
  }
  return score(torch::cat(preds), labels, classes, ignore_index);
}

EvalReport evaluate_reconstruction(TaskNet& teacher, models::Generator& g_ts, const EvalSet& eval,
                                   int classes) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> preds;
  const auto& ev = eval.inputs.events;
  for (int64_t i = 0; i < ev.size(0); i += kEvalChunk) {
    const auto chunk = ev.slice(0, i, std::min(i + kEvalChunk, ev.size(0)));
    preds.push_back(teacher->forward(g_ts->forward(chunk)).logits.argmax(1));
  }
  return score(torch::cat(preds), eval.labels, classes, -1);
}

torch::Tensor infer(TaskNet& student, const torch::Tensor& events) {
  torch::NoGradGuard guard;
  return student->forward(events).logits;
}

torch::Tensor infer(const std::filesystem::path& student_checkpoint, const torch::Tensor& events) {
  auto net = ckpt::load_network(student_checkpoint);
  if (net.role != Role::student_ev) {
    throw FormatError(FormatErrc::bad_record, "inference needs an event student, checkpoint holds a " +
                                                  std::string(models::to_string(net.role)));
  }
  return infer(net.as<TaskNet>(), events);
}

// ---------------------------------------------------------------------------
// State

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) { return splitmix(splitmix(seed) ^ tag); }

enum SeedTag : std::uint64_t {
  kTeacherTag = 0x7EAC,
  kStudentEvTag = 0x5E01,
  kStudentApsTag = 0x5A02,
  kGenTsTag = 0x6701,
  kGenStTag = 0x6702,
  kDiscImgTag = 0xD101,
  kDiscEvTag = 0xD102,
  kClfTag = 0xC1F0,
  kSamplerTag = 0x5A3F,
};

models::Head head_for(const DistillConfig& c) {
  return c.spatial() ? models::Head::segmentation : models::Head::recognition;
}

models::ArchConfig task_arch(const DistillConfig& c, int in_channels, std::uint64_t tag) {
  models::ArchConfig a;
  a.in_channels = in_channels;
  a.out_channels = c.data.classes;
  a.base_width = c.model.base_width;
  a.stages = c.model.stages;
  a.head = head_for(c);
  a.seed = derive(c.optim.seed, tag);
  return a;
}

torch::optim::AdamOptions adam(double lr, double beta1) {
  return torch::optim::AdamOptions(lr).betas({beta1, 0.999});
}

std::vector<torch::Tensor> params_of(std::initializer_list<const std::optional<Network>*> nets) {
  std::vector<torch::Tensor> out;
  for (const auto* n : nets) {
    if (*n) {
      for (auto& p : (*n)->module()->parameters()) out.push_back(p);
    }
  }
  return out;
}

void attach_optimizers(TrainState& s) {
  const auto& c = s.config;
  s.optimizers.clear();
  s.optimizers["s_ev"] = std::make_unique<torch::optim::Adam>(params_of({&s.s_ev}), adam(c.optim.lr, c.optim.beta1));
  if (s.s_aps) {
    s.optimizers["s_aps"] =
        std::make_unique<torch::optim::Adam>(params_of({&s.s_aps}), adam(c.optim.lr, c.optim.beta1));
  }
  if (s.g_ts) {
    s.optimizers["gen"] =
        std::make_unique<torch::optim::Adam>(params_of({&s.g_ts, &s.g_st}), adam(c.optim.lr, c.optim.gan_beta1));
    s.optimizers["disc"] =
        std::make_unique<torch::optim::Adam>(params_of({&s.d_img, &s.d_ev}), adam(c.optim.lr, c.optim.gan_beta1));
  }
  if (s.h) {
    s.optimizers["h"] = std::make_unique<torch::optim::Adam>(params_of({&s.h}), adam(c.optim.lr, c.optim.gan_beta1));
  }
  if (c.adapt_teacher) {
    s.optimizers["teacher"] =
        std::make_unique<torch::optim::Adam>(params_of({&s.teacher}), adam(c.optim.lr, c.optim.beta1));
  }
}

void check_taps(const DistillConfig& c, TaskNet& teacher, TaskNet& student) {
  for (const std::string& tap : {c.resolved_ag_tap(), c.resolved_da_tap()}) {
    int tc = 0;
    int sc = 0;
    try {
      tc = teacher->feature_channels(tap);
      sc = student->feature_channels(tap);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (tc != sc) {
      throw ConfigError("feature tap '" + tap + "' has " + std::to_string(tc) + " teacher channels but " +
                        std::to_string(sc) + " student channels");
    }
  }
}

void set_trainable(std::optional<Network>& n, bool on) {
  if (!n) return;
  if (on) models::unfreeze(*n->module());
  else models::freeze(*n->module());
}

}  // namespace

std::vector<std::pair<std::string, Network*>> TrainState::networks() {
  std::vector<std::pair<std::string, Network*>> out;
  const std::pair<const char*, std::optional<Network>*> all[] = {
      {"teacher", &teacher}, {"s_ev", &s_ev},   {"s_aps", &s_aps}, {"g_ts", &g_ts},
      {"g_st", &g_st},       {"d_img", &d_img}, {"d_ev", &d_ev},   {"h", &h}};
  for (const auto& [name, net] : all) {
    if (*net) out.emplace_back(name, &**net);
  }
  return out;
}

TrainState make_state(const DistillConfig& config, const Network& teacher) {
  config.validate();
  const auto& c = config;
  if (teacher.role != Role::teacher) throw ConfigError("make_state needs a teacher network");
  const auto& ta = teacher.arch;
  if (ta.in_channels != c.data.image_channels || ta.out_channels != c.data.classes || ta.head != head_for(c) ||
      ta.base_width != c.model.base_width || ta.stages != c.model.stages) {
    throw ConfigError("teacher architecture does not match the distillation config");
  }

  TrainState s;
  s.config = c;
  s.rng.seed(derive(c.optim.seed, kSamplerTag));
  s.teacher = ckpt::clone(teacher);
  if (!c.adapt_teacher) models::freeze(*s.teacher->module());

  const int ev_ch = c.event_channels();
  const int img_ch = c.data.image_channels;
  s.s_ev = models::build(Role::student_ev, task_arch(c, ev_ch, kStudentEvTag));
  check_taps(c, s.teacher->as<TaskNet>(), s.s_ev->as<TaskNet>());
  if (c.toggles.use_s_aps) s.s_aps = models::build(Role::student_aps, task_arch(c, img_ch, kStudentApsTag));

  if (c.toggles.bmr) {
    models::ArchConfig g;
    g.base_width = c.model.gen_width;
    g.in_channels = ev_ch;
    g.out_channels = img_ch;
    g.codomain = models::Codomain::unit_interval;
    g.seed = derive(c.optim.seed, kGenTsTag);
    s.g_ts = models::build(Role::gen, g);
    g.in_channels = img_ch;
    g.out_channels = ev_ch;
    g.codomain = c.data.representation == Representation::voxel ? models::Codomain::unbounded
                                                                : models::Codomain::unit_interval;
    g.seed = derive(c.optim.seed, kGenStTag);
    s.g_st = models::build(Role::gen, g);

    models::ArchConfig d;
    d.base_width = c.model.disc_width;
    d.in_channels = img_ch;
    d.seed = derive(c.optim.seed, kDiscImgTag);
    s.d_img = models::build(Role::disc, d);
    d.in_channels = ev_ch;
    d.seed = derive(c.optim.seed, kDiscEvTag);
    s.d_ev = models::build(Role::disc, d);
  }
  if (c.toggles.dm) {
    models::ArchConfig h;
    h.base_width = c.model.clf_width;
    h.in_channels = s.s_ev->as<TaskNet>()->feature_channels(c.resolved_da_tap()) + c.data.classes;
    h.seed = derive(c.optim.seed, kClfTag);
    s.h = models::build(Role::dist_clf, h);
  }
  attach_optimizers(s);
  return s;
}

std::pair<SourceBatch, TargetBatch> sample_batches(TrainState& state, const SourceTensors& source,
                                                   const TargetTensors& target) {
  const int64_t b = state.config.optim.batch_size;
  auto draw = [&](int64_t n) {
    if (n <= 0) throw std::invalid_argument("cannot sample from an empty corpus");
    std::uniform_int_distribution<int64_t> u(0, n - 1);
    std::vector<int64_t> idx(static_cast<std::size_t>(b));
    for (auto& i : idx) i = u(state.rng);
    return torch::tensor(idx, torch::kInt64);
  };
  SourceBatch sb;
  if (source.size() > 0) {
    const auto i = draw(source.size());
    sb.images = source.images.index_select(0, i);
    sb.labels = source.labels.index_select(0, i);
  }
  TargetBatch tb;
  const auto j = draw(target.size());
  tb.events = target.events.index_select(0, j);
  if (target.aps.defined()) tb.aps = target.aps.index_select(0, j);
  return {sb, tb};
}

// ---------------------------------------------------------------------------
// Training step

namespace {

torch::Tensor probs(const torch::Tensor& logits) { return torch::softmax(logits.detach(), 1); }

struct MatchPair {
  torch::Tensor fs, ft, ps, pt;
};

double value(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

LossReport train_step(TrainState& st, const SourceBatch& src, const TargetBatch& tgt) {
  const auto& c = st.config;
  const auto& tg = c.toggles;
  const auto& w = c.weights;
  const bool has_source = src.images.defined();
  const bool bmr = tg.bmr;
  if (bmr && !has_source) throw std::invalid_argument("reconstruction needs a source batch");
  if (c.has_aps() && !tgt.aps.defined()) throw std::invalid_argument("this mode needs APS frames in the target batch");
  const std::string ag_tap = c.resolved_ag_tap();
  const std::string da_tap = c.resolved_da_tap();

  auto& teacher = st.teacher->as<TaskNet>();
  auto& s_ev = st.s_ev->as<TaskNet>();
  const torch::Tensor& e = tgt.events;
  const torch::Tensor& x_aps = tgt.aps;
  const torch::Tensor& x_s = src.images;
  const torch::Tensor& y_s = src.labels;

  LossReport rep;
  losses::LossParts parts;

  // Generators.
  torch::Tensor fake_img;
  torch::Tensor fake_ev;
  torch::Tensor real_img_score;
  torch::Tensor real_ev_score;
  if (bmr) {
    auto& g_ts = st.g_ts->as<models::Generator>();
    auto& g_st = st.g_st->as<models::Generator>();
    fake_img = g_ts->forward(e);
    fake_ev = g_st->forward(x_s);

    // 1. discriminators
    auto& d_img = st.d_img->as<models::Discriminator>();
    auto& d_ev = st.d_ev->as<models::Discriminator>();
    auto& opt = *st.optimizers.at("disc");
    opt.zero_grad();
    real_img_score = d_img->forward(x_s);
    real_ev_score = d_ev->forward(e);
    const auto li = losses::adversarial_losses(real_img_score, d_img->forward(fake_img.detach())).discriminator;
    const auto le = losses::adversarial_losses(real_ev_score, d_ev->forward(fake_ev.detach())).discriminator;
    const auto ld = li + le;
    ld.backward();
    opt.step();
    rep["disc"] = value(ld);
  }

  // Task-network forwards.
  const TaskOutput ev_out = s_ev->forward(e);
  std::optional<TaskOutput> crafted;
  if (bmr) crafted = s_ev->forward(c.ce_through_generator ? fake_ev : fake_ev.detach());

  // Teacher guidance input: reconstructed images with BMR, APS frames otherwise.
  const bool need_t_in = tg.pi || tg.ag;
  std::optional<TaskOutput> t_in;
  if (need_t_in) {
    if (bmr && tg.pi) {
      t_in = teacher->forward(fake_img);
    } else {
      torch::NoGradGuard ng;
      t_in = teacher->forward(bmr ? fake_img.detach() : x_aps);
    }
  }
  std::optional<TaskOutput> t_aps;
  if (c.has_aps() && (tg.dm || !bmr)) {
    if (!bmr && t_in) {
      t_aps = t_in;
    } else {
      torch::NoGradGuard ng;
      t_aps = teacher->forward(x_aps);
    }
  }
  std::optional<TaskOutput> t_src;
  std::optional<TaskOutput> sa_src;
  std::optional<TaskOutput> sa_aps;
  if (st.s_aps) {
    auto& s_aps = st.s_aps->as<TaskNet>();
    sa_src = s_aps->forward(x_s);
    sa_aps = s_aps->forward(x_aps);
    if (tg.dm) {
      torch::NoGradGuard ng;
      t_src = teacher->forward(x_s);
    }
  }

  // 2. distribution classifier
  std::vector<MatchPair> pairs;
  if (tg.dm) {
    MatchPair p;
    const TaskOutput& src_side = bmr ? *crafted : *t_aps;
    p.fs = src_side.feature(da_tap);
    p.ps = probs(src_side.logits);
    p.ft = ev_out.feature(da_tap);
    p.pt = probs(ev_out.logits);
    pairs.push_back(p);
    if (sa_src) pairs.push_back({sa_src->feature(da_tap), sa_aps->feature(da_tap), probs(sa_src->logits),
                                 probs(sa_aps->logits)});

    auto& h = st.h->as<models::DistributionClassifier>();
    const losses::Classifier hf = [&h](const torch::Tensor& x) { return h->forward(x); };
    auto& opt = *st.optimizers.at("h");
    opt.zero_grad();
    torch::Tensor lh;
    for (const auto& mp : pairs) {
      const auto l = losses::da_match_losses(mp.fs.detach(), mp.ft.detach(), mp.ps, mp.pt, hf).classifier;
      lh = lh.defined() ? lh + l : l;
    }
    lh = lh / static_cast<double>(pairs.size());
    lh.backward();
    opt.step();
    rep["h"] = value(lh);
  }

  // 3. generators and students
  set_trainable(st.d_img, false);
  set_trainable(st.d_ev, false);
  set_trainable(st.h, false);

  if (bmr) parts.ce = losses::cross_entropy(crafted->logits, y_s, c.data.ignore_index);
  if (sa_src) {
    const auto l = losses::cross_entropy(sa_src->logits, y_s, c.data.ignore_index);
    parts.ce = parts.ce.defined() ? parts.ce + l : l;
  }
  if (bmr) {
    auto& g_ts = st.g_ts->as<models::Generator>();
    auto& g_st = st.g_st->as<models::Generator>();
    if (c.has_aps()) parts.bmr_pixelwise = losses::l1_pixelwise(fake_img, x_aps);
    const auto a_img = losses::adversarial_losses(real_img_score.detach(),
                                                  st.d_img->as<models::Discriminator>()->forward(fake_img));
    const auto a_ev = losses::adversarial_losses(real_ev_score.detach(),
                                                 st.d_ev->as<models::Discriminator>()->forward(fake_ev));
    parts.bmr_adversarial = a_img.generator + a_ev.generator;
    parts.bmr_cycle = losses::cycle_loss(e, g_st->forward(fake_img)) + losses::cycle_loss(x_s, g_ts->forward(fake_ev));
  }
  if (tg.pi) parts.bmr_dsc = losses::dsc_loss(t_in->logits, ev_out.logits);
  if (tg.dm) {
    if (sa_aps) {
      parts.da_aps = losses::da_aps_loss(sa_aps->logits, t_aps->logits, sa_src->logits, t_src->logits,
                                         c.l1_aps_mode);
    }
    if (t_aps) parts.da_ev = losses::da_ev_loss(t_aps->logits, ev_out.logits);
    auto& h = st.h->as<models::DistributionClassifier>();
    const losses::Classifier hf = [&h](const torch::Tensor& x) { return h->forward(x); };
    torch::Tensor lf;
    for (const auto& mp : pairs) {
      const auto l = losses::da_match_losses(mp.fs, mp.ft, mp.ps, mp.pt, hf).task;
      lf = lf.defined() ? lf + l : l;
    }
    parts.da_match = lf / static_cast<double>(pairs.size());
  }
  if (tg.ag) {
    parts.ag = losses::ag_loss(t_in->feature(ag_tap).detach(), ev_out.feature(ag_tap), w.sigma,
                               c.model.aggregation);
  }
  if (tg.ml) parts.md = losses::md_loss(ev_out.logits, sa_aps->logits, w.tau);

  const auto total = losses::total_objective(parts, w);
  for (const auto& [name, opt] : st.optimizers) {
    if (name != "disc" && name != "h") opt->zero_grad();
  }
  if (total.requires_grad()) total.backward();
  for (const auto& [name, opt] : st.optimizers) {
    if (name != "disc" && name != "h" && name != "teacher") opt->step();
  }

  // Optional teacher adaptation: only the max-min term reaches the teacher.
  if (c.adapt_teacher && tg.dm) {
    auto& h = st.h->as<models::DistributionClassifier>();
    const losses::Classifier hf = [&h](const torch::Tensor& x) { return h->forward(x); };
    const torch::Tensor t_src_in = has_source ? x_s : x_aps;
    const torch::Tensor t_tgt_in = bmr ? fake_img.detach() : x_aps;
    const auto a = teacher->forward(t_src_in);
    const auto b = teacher->forward(t_tgt_in);
    const auto lt = losses::da_match_losses(a.feature(da_tap), b.feature(da_tap), probs(a.logits),
                                            probs(b.logits), hf)
                        .task;
    auto& opt = *st.optimizers.at("teacher");
    opt.zero_grad();
    lt.backward();
    opt.step();
    rep["teacher_adapt"] = value(lt);
  }

  set_trainable(st.d_img, true);
  set_trainable(st.d_ev, true);
  set_trainable(st.h, true);

  rep["total"] = value(total);
  rep["ce"] = value(parts.ce);
  if (bmr) {
    rep["bmr_pixelwise"] = value(parts.bmr_pixelwise);
    rep["bmr_adversarial"] = value(parts.bmr_adversarial);
    rep["bmr_cycle"] = value(parts.bmr_cycle);
  }
  if (tg.pi) rep[bmr ? "dsc" : "pi"] = value(parts.bmr_dsc);
  if (tg.dm) {
    rep["da_aps"] = value(parts.da_aps);
    rep["da_ev"] = value(parts.da_ev);
    rep["da_match"] = value(parts.da_match);
  }
  if (tg.ag) rep["ag"] = value(parts.ag);
  if (tg.ml) rep["md"] = value(parts.md);
  ++st.step;
  return rep;
}

// ---------------------------------------------------------------------------
// Teacher

TeacherResult pretrain_teacher(const SourceTensors& source, const DistillConfig& config) {
  config.validate();
  const auto& c = config;
  const int64_t n = source.size();
  const auto hold = std::max<int64_t>(1, std::llround(static_cast<double>(n) * c.teacher.heldout_fraction));
  if (n - hold < 1) throw std::invalid_argument("source corpus too small for a held-out split");
  const auto train_x = source.images.slice(0, 0, n - hold);
  const auto train_y = source.labels.slice(0, 0, n - hold);
  const auto held_x = source.images.slice(0, n - hold, n);
  const auto held_y = source.labels.slice(0, n - hold, n);

  Network net = models::build(Role::teacher, task_arch(c, c.data.image_channels, kTeacherTag));
  auto& t = net.as<TaskNet>();
  torch::optim::Adam opt(t->parameters(), adam(c.teacher.lr, 0.9));
  std::mt19937_64 rng(derive(c.optim.seed, kTeacherTag));
  std::uniform_int_distribution<int64_t> u(0, train_x.size(0) - 1);

  int step = 0;
  auto train_until = [&](int until) {
    for (; step < until; ++step) {
      std::vector<int64_t> idx(static_cast<std::size_t>(c.teacher.batch_size));
      for (auto& i : idx) i = u(rng);
      const auto ii = torch::tensor(idx, torch::kInt64);
      opt.zero_grad();
      const auto loss = losses::cross_entropy(t->forward(train_x.index_select(0, ii)).logits,
                                              train_y.index_select(0, ii), c.data.ignore_index);
      loss.backward();
      opt.step();
    }
  };
  train_until(c.teacher.steps);
  double held = evaluate(t, held_x, held_y, c.data.classes, c.data.ignore_index).score();
  while (held < c.teacher.miou_floor && step < c.teacher.max_steps) {
    train_until(std::min(c.teacher.max_steps, step + 250));
    held = evaluate(t, held_x, held_y, c.data.classes, c.data.ignore_index).score();
  }
  if (held < c.teacher.miou_floor) {
    std::ostringstream os;
    os << "teacher held-out score " << held << " below floor " << c.teacher.miou_floor << " after " << step
       << " steps";
    throw std::runtime_error(os.str());
  }
  if (!c.adapt_teacher) models::freeze(*net.module());
  return TeacherResult{std::move(net), held, step};
}

// ---------------------------------------------------------------------------
// Runs

namespace {

json report_json(const EvalReport& r, const LossReport& losses) {
  json iou = json::array();
  for (double v : r.iou.iou) iou.push_back(std::isnan(v) ? json(nullptr) : json(v));
  json j = {{"step", r.step}, {"miou", r.iou.mean}, {"iou", iou}, {"losses", losses}};
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  return j;
}

}  // namespace

RunResult run(TrainState& state, const SourceTensors& source, const TargetTensors& target, const EvalSet* eval,
              const RunOptions& options) {
  const auto& c = state.config;
  RunResult result;
  LossReport acc;
  int acc_n = 0;
  std::ofstream metrics;
  if (options.run_dir) {
    std::filesystem::create_directories(*options.run_dir / "checkpoints");
    metrics.open(*options.run_dir / "metrics.jsonl", std::ios::app);
  }
  auto& student = state.s_ev->as<TaskNet>();
  bool have_best = false;
  while (state.step < c.optim.steps) {
    const auto [sb, tb] = sample_batches(state, source, target);
    const LossReport rep = train_step(state, sb, tb);
    for (const auto& [k, v] : rep) acc[k] += v;
    ++acc_n;
    const bool last = state.step == c.optim.steps;
    if (state.step % c.eval_every == 0 || last) {
      LossReport mean;
      for (const auto& [k, v] : acc) mean[k] = v / acc_n;
      acc.clear();
      acc_n = 0;
      result.losses.push_back(mean);
      if (eval) {
        EvalReport r = evaluate(student, eval->inputs.events, eval->labels, c.data.classes, c.data.ignore_index);
        r.step = state.step;
        if (!have_best || r.score() > result.best.score()) {
          result.best = r;
          result.best_student = ckpt::clone(*state.s_ev);
          have_best = true;
        }
        result.history.push_back(r);
        if (metrics.is_open()) metrics << report_json(r, mean).dump() << "\n" << std::flush;
        if (options.verbose) {
          std::cerr << "step " << r.step << " score " << r.score() << " total " << mean["total"] << "\n";
        }
      } else if (metrics.is_open()) {
        metrics << json{{"step", state.step}, {"losses", mean}}.dump() << "\n" << std::flush;
      }
    }
    if (options.run_dir && c.checkpoint_every > 0 && state.step % c.checkpoint_every == 0) {
      save_state(state, *options.run_dir / "checkpoints" / ("step_" + std::to_string(state.step) + ".evdc"));
    }
  }
  if (!result.history.empty()) result.final = result.history.back();
  if (options.run_dir) {
    save_state(state, *options.run_dir / "checkpoints" / "final.evdc");
    export_student(*state.s_ev, c.data, *options.run_dir / "export" / "student_ev.evdc");
  }
  return result;
}

RunResult run(const DistillConfig& config, const Network& teacher, const SourceTensors& source,
              const TargetTensors& target, const EvalSet* eval, const RunOptions& options) {
  TrainState state = make_state(config, teacher);
  return run(state, source, target, eval, options);
}

RunResult baseline_events_aps_only(const DistillConfig& config, const Network& teacher,
                                   const TargetTensors& target, const EvalSet* eval, const RunOptions& options) {
  if (config.toggles.bmr) throw ConfigError("the events + APS baseline has no reconstruction; set toggles.bmr = false");
  if (config.toggles.use_s_aps || config.toggles.ml) {
    throw ConfigError("the events + APS baseline uses no source data; use_s_aps and ml must be false");
  }
  if (!config.has_aps()) throw ConfigError("the events + APS baseline needs APS frames");
  TrainState state = make_state(config, teacher);
  return run(state, SourceTensors{}, target, eval, options);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_state(const TrainState& state, const std::filesystem::path& path) {
  ckpt::Archive a;
  a.header["kind"] = "train_state";
  a.header["step"] = state.step;
  a.header["config"] = config::to_ini(state.config);
  std::ostringstream rng;
  rng << state.rng;
  a.header["sampler_state"] = rng.str();
  auto& mut = const_cast<TrainState&>(state);
  for (const auto& [name, net] : mut.networks()) ckpt::put_network(a, name, *net);
  for (const auto& [name, opt] : state.optimizers) a.blobs["optim/" + name] = ckpt::serialize_optimizer(*opt);
  ckpt::write_archive(path, a);
}

TrainState load_state(const std::filesystem::path& path) {
  const ckpt::Archive a = ckpt::read_archive(path);
  if (a.header.value("kind", "") != "train_state") {
    throw FormatError(FormatErrc::bad_header, path.string() + " is not a training-state checkpoint");
  }
  TrainState s;
  s.config = config::parse(a.header.at("config").get<std::string>()).distill;
  s.step = a.header.at("step").get<int64_t>();
  std::istringstream rng(a.header.at("sampler_state").get<std::string>());
  rng >> s.rng;
  const std::pair<const char*, std::optional<Network>*> all[] = {
      {"teacher", &s.teacher}, {"s_ev", &s.s_ev},   {"s_aps", &s.s_aps}, {"g_ts", &s.g_ts},
      {"g_st", &s.g_st},       {"d_img", &s.d_img}, {"d_ev", &s.d_ev},   {"h", &s.h}};
  for (const auto& [name, slot] : all) {
    if (a.header.at("networks").contains(name)) *slot = ckpt::get_network(a, name);
  }
  if (!s.teacher || !s.s_ev) throw FormatError(FormatErrc::bad_record, "checkpoint lacks teacher or student");
  if (!s.config.adapt_teacher) models::freeze(*s.teacher->module());
  attach_optimizers(s);
  for (const auto& [name, opt] : s.optimizers) {
    const auto it = a.blobs.find("optim/" + name);
    if (it == a.blobs.end()) throw FormatError(FormatErrc::bad_record, "checkpoint lacks optimizer '" + name + "'");
    ckpt::deserialize_optimizer(it->second, *opt);
  }
  return s;
}

void export_student(const Network& student, const DataConfig& data, const std::filesystem::path& path) {
  if (student.role != Role::student_ev) throw std::invalid_argument("export_student needs the event student");
  ckpt::Archive a;
  a.header["kind"] = "network";
  a.header["data"] = {{"representation", to_string(data.representation)},
                      {"bins", data.bins},
                      {"window_us", data.window_us},
                      {"classes", data.classes}};
  ckpt::put_network(a, "net", student);
  ckpt::write_archive(path, a);
}

DataConfig exported_data_config(const std::filesystem::path& path) {
  const ckpt::Archive a = ckpt::read_archive(path);
  if (!a.header.contains("data")) throw FormatError(FormatErrc::bad_header, path.string() + " has no data section");
  const auto& d = a.header.at("data");
  DataConfig c;
  c.representation = config::representation_from_string(d.at("representation").get<std::string>());
  c.bins = d.at("bins").get<int>();
  c.window_us = d.at("window_us").get<std::int64_t>();
  c.classes = d.at("classes").get<int>();
  return c;
}

}  // namespace evd::engine
