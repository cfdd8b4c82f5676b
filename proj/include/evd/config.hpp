#pragma once

// INI configuration. Sections and keys:
//
//   [run]      mode seed steps batch_size lr beta1 gan_beta1 eval_every
//              checkpoint_every adapt_teacher l1_aps_mode ce_through_generator preset
//   [toggles]  pi ag dm ml bmr use_s_aps
//   [weights]  lambda_da lambda_ag lambda_md tau sigma pixelwise cycle adversarial
//   [model]    base_width stages gen_width disc_width clf_width ag_tap da_tap aggregation
//   [data]     representation bins window_ms classes
//   [teacher]  steps max_steps lr batch_size miou_floor heldout_fraction
//   [synth]    task source_scenes target_scenes eval_scenes frames_per_scene
//              frame_interval_us samples_per_scene window_ms contrast_threshold
//              gamma contrast noise_sigma blur_px source_seed target_seed
//
// Overrides use "section.key=value" and are applied after the file. Unknown
// sections or keys, malformed values, and inconsistent combinations raise
// ConfigError.

#include <filesystem>
#include <string>
#include <vector>

#include "evd/engine.hpp"
#include "evd/synth.hpp"

namespace evd::config {

struct Project {
  engine::DistillConfig distill;
  synth::CorpusOptions corpus;
};

Project parse(const std::string& ini_text, const std::vector<std::string>& overrides = {});
Project load(const std::filesystem::path& ini_file, const std::vector<std::string>& overrides = {});

/// Round-trips through parse().
std::string to_ini(const Project& project);
std::string to_ini(const engine::DistillConfig& distill);

engine::Mode mode_from_string(const std::string& s);
engine::Representation representation_from_string(const std::string& s);
losses::Aggregation aggregation_from_string(const std::string& s);
const char* to_string(losses::Aggregation a);

}  // namespace evd::config
