#pragma once

// Cross-modal distillation engine.
//
// One train_step runs the alternating cycle:
//   1. discriminators step on their real/fake classification losses;
//   2. the distribution classifier h steps on modality classification;
//   3. generators and students step together on the total objective, so the
//      distillation terms reach the generators through the teacher input.
// Target labels never enter this module except through EvalSet.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "evd/losses.hpp"
#include "evd/metrics.hpp"
#include "evd/models.hpp"
#include "evd/synth.hpp"

namespace evd::engine {

enum class Mode { segmentation_with_aps, segmentation_no_aps, recognition };
enum class Representation { multichannel, voxel, count2 };

const char* to_string(Mode m);
const char* to_string(Representation r);

/// Distillation components that can be switched on and off.
struct Toggles {
  bool pi = true;         // pixel-wise KD from the teacher on reconstructed images (DSC)
  bool ag = true;         // affinity graph KD
  bool dm = true;         // distribution adaptation (prediction matching + modality classifier)
  bool ml = true;         // mutual learning between the two students
  bool bmr = true;        // bidirectional reconstruction generators + discriminators
  bool use_s_aps = true;  // APS student
  bool operator==(const Toggles&) const = default;
};

/// "PI", "PI+AG", "PI+AG+DM", "PI+AG+DM+ML" (alias "full"), "no_bmr", "ce_only",
/// "events_aps" (the toggles used by baseline_events_aps_only).
Toggles preset(const std::string& name);

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double gan_beta1 = 0.5;  // generators, discriminators, distribution classifier
  int steps = 2000;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

struct TeacherConfig {
  int steps = 2000;
  int max_steps = 4000;
  double lr = 1e-3;
  int batch_size = 8;
  double miou_floor = 0.85;
  double heldout_fraction = 0.1;
};

struct ModelConfig {
  int base_width = 32;
  int stages = 4;
  int gen_width = 16;
  int disc_width = 16;
  int clf_width = 64;
  std::string ag_tap;  // empty: last decoder tap (segmentation) or deepest encoder tap
  std::string da_tap;  // empty: deepest encoder tap
  losses::Aggregation aggregation = losses::Aggregation::mean;
};

struct DataConfig {
  Representation representation = Representation::multichannel;
  int bins = 3;
  std::int64_t window_us = 50000;
  int classes = synth::kClassCount;
  int image_channels = 1;
  int ignore_index = -1;
};

struct DistillConfig {
  Mode mode = Mode::segmentation_with_aps;
  losses::LossWeights weights;
  Toggles toggles;
  OptimizerConfig optim;
  TeacherConfig teacher;
  ModelConfig model;
  DataConfig data;
  int eval_every = 200;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  bool adapt_teacher = false;
  bool l1_aps_mode = false;
  /// Let the CE loss on crafted events reach G_{S->T}.
  bool ce_through_generator = true;

  /// Throws ConfigError on inconsistent toggles / mode / values.
  void validate() const;
  [[nodiscard]] int event_channels() const;
  [[nodiscard]] bool has_aps() const { return mode == Mode::segmentation_with_aps; }
  [[nodiscard]] bool spatial() const { return mode != Mode::recognition; }
  [[nodiscard]] std::string resolved_da_tap() const;
  [[nodiscard]] std::string resolved_ag_tap() const;
};

/// Dense network inputs for a target corpus.
struct TargetTensors {
  torch::Tensor events;  // N x C x H x W
  torch::Tensor aps;     // N x 1 x H x W, undefined without APS
  [[nodiscard]] int64_t size() const { return events.defined() ? events.size(0) : 0; }
};

struct SourceTensors {
  torch::Tensor images;  // N x 1 x H x W
  torch::Tensor labels;  // N x H x W (int64) or N for recognition
  [[nodiscard]] int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

/// Eval-only bundle: the single place where target labels meet network inputs.
struct EvalSet {
  TargetTensors inputs;
  torch::Tensor labels;  // N x H x W or N, int64
};

torch::Tensor encode_window(const EventWindow& w, const DataConfig& data);
TargetTensors encode_target(const synth::TargetCorpus& corpus, const DataConfig& data, bool with_aps);
SourceTensors to_tensors(const synth::SourceCorpus& corpus);
EvalSet make_eval_set(const synth::TargetCorpus& corpus, const synth::SealedLabels& labels,
                      const DataConfig& data, bool with_aps);

struct EvalReport {
  int64_t step = 0;
  ConfusionMatrix confusion;
  IouReport iou;
  std::optional<double> accuracy;  // recognition
  [[nodiscard]] double score() const { return accuracy ? *accuracy : iou.mean; }
};

/// Runs the network on inputs in chunks and scores argmax predictions.
EvalReport evaluate(models::TaskNet& net, const torch::Tensor& inputs, const torch::Tensor& labels,
                    int classes, int ignore_index = -1);

struct TrainState {
  DistillConfig config;
  std::optional<models::Network> teacher;
  std::optional<models::Network> s_ev;
  std::optional<models::Network> s_aps;
  std::optional<models::Network> g_ts;  // events -> image
  std::optional<models::Network> g_st;  // image -> events
  std::optional<models::Network> d_img;
  std::optional<models::Network> d_ev;
  std::optional<models::Network> h;
  std::map<std::string, std::unique_ptr<torch::optim::Adam>> optimizers;
  int64_t step = 0;
  std::mt19937_64 rng;

  /// Networks by name ("teacher", "s_ev", ...), skipping absent ones.
  [[nodiscard]] std::vector<std::pair<std::string, models::Network*>> networks();
};

/// Builds every network required by the config around a pretrained teacher.
TrainState make_state(const DistillConfig& config, const models::Network& teacher);

using LossReport = std::map<std::string, double>;

struct TargetBatch {
  torch::Tensor events;
  torch::Tensor aps;  // undefined when the mode has no APS frames
};

struct SourceBatch {
  torch::Tensor images;
  torch::Tensor labels;
};

LossReport train_step(TrainState& state, const SourceBatch& source, const TargetBatch& target);

/// Uniform, independent sampling from both corpora using the state's RNG.
std::pair<SourceBatch, TargetBatch> sample_batches(TrainState& state, const SourceTensors& source,
                                                   const TargetTensors& target);

struct TeacherResult {
  models::Network network;
  double heldout_score = 0.0;
  int steps = 0;
};

/// Supervised training on the source split, frozen afterwards unless
/// adapt_teacher is set. Throws std::runtime_error when the held-out score
/// stays below config.teacher.miou_floor after max_steps.
TeacherResult pretrain_teacher(const SourceTensors& source, const DistillConfig& config);

struct RunResult {
  std::vector<EvalReport> history;
  std::vector<LossReport> losses;  // one per eval point
  EvalReport best;
  EvalReport final;
  std::optional<models::Network> best_student;
};

struct RunOptions {
  std::optional<std::filesystem::path> run_dir;
  bool verbose = false;
};

/// Full schedule from an already-built state.
RunResult run(TrainState& state, const SourceTensors& source, const TargetTensors& target,
              const EvalSet* eval, const RunOptions& options = {});

/// Convenience: make_state + run.
RunResult run(const DistillConfig& config, const models::Network& teacher,
              const SourceTensors& source, const TargetTensors& target, const EvalSet* eval,
              const RunOptions& options = {});

/// Events + APS only: teacher on x_aps, student on e, DA and AG terms, no
/// reconstruction and no source data. Rejects configs with reconstruction on.
RunResult baseline_events_aps_only(const DistillConfig& config, const models::Network& teacher,
                                   const TargetTensors& target, const EvalSet* eval,
                                   const RunOptions& options = {});

/// Exactly one student forward; never touches generators or discriminators.
torch::Tensor infer(models::TaskNet& student, const torch::Tensor& events);
torch::Tensor infer(const std::filesystem::path& student_checkpoint, const torch::Tensor& events);

/// Teacher score on G_{T->S}(e) images.
EvalReport evaluate_reconstruction(models::TaskNet& teacher, models::Generator& g_ts,
                                   const EvalSet& eval, int classes);

// Checkpointing of the whole training state.
void save_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path);

/// Student-only artifact (no generator / discriminator parameters) plus the
/// input encoding it expects.
void export_student(const models::Network& student, const DataConfig& data,
                    const std::filesystem::path& path);
DataConfig exported_data_config(const std::filesystem::path& path);

}  // namespace evd::engine
