#pragma once

// Network roles and desk-scale reference architectures.
//
// TaskNet is a small U-Net style encoder-decoder (group normalization, no
// batch statistics) exposing named feature taps. Generators translate between
// the image and event representations at full resolution; discriminators and
// the distribution classifier emit probabilities strictly inside (0, 1).

#include <atomic>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <torch/torch.h>

namespace evd::models {

enum class Role { teacher, student_ev, student_aps, gen, disc, dist_clf };

const char* to_string(Role r);
Role role_from_string(const std::string& s);

enum class Head { segmentation, recognition };
enum class Codomain { unit_interval, unbounded };

struct ArchConfig {
  int in_channels = 1;
  /// Classes for task networks, output channels for generators; unused otherwise.
  int out_channels = 5;
  int base_width = 32;
  int stages = 4;  // resolution levels; stride factor is 2^(stages-1)
  Head head = Head::segmentation;
  Codomain codomain = Codomain::unit_interval;
  std::uint64_t seed = 0;

  [[nodiscard]] int stride_factor() const { return 1 << (stages - 1); }
  bool operator==(const ArchConfig&) const = default;
};

/// Probabilities are squeezed into [kProbEps, 1 - kProbEps].
inline constexpr double kProbEps = 1e-4;

/// Logits plus feature taps in network order.
struct TaskOutput {
  torch::Tensor logits;
  std::vector<std::pair<std::string, torch::Tensor>> features;

  [[nodiscard]] const torch::Tensor& feature(const std::string& name) const;
};

class TaskNetImpl : public torch::nn::Module {
 public:
  explicit TaskNetImpl(const ArchConfig& cfg);
  TaskOutput forward(const torch::Tensor& x);
  /// Tap names in output order; feature_channels(name) gives their width.
  [[nodiscard]] std::vector<std::string> tap_names() const;
  [[nodiscard]] int feature_channels(const std::string& tap) const;
  [[nodiscard]] const ArchConfig& config() const { return cfg_; }

 private:
  ArchConfig cfg_;
  std::vector<int> widths_;
  torch::nn::ModuleList encoder_{nullptr};
  torch::nn::ModuleList decoder_{nullptr};
  torch::nn::Conv2d seg_head_{nullptr};
  torch::nn::Linear cls_head_{nullptr};
};
TORCH_MODULE(TaskNet);

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const ArchConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  [[nodiscard]] const ArchConfig& config() const { return cfg_; }

  static std::uint64_t forward_count() { return calls_.load(); }
  static void reset_forward_count() { calls_ = 0; }

 private:
  ArchConfig cfg_;
  torch::nn::Sequential down_{nullptr};
  torch::nn::Sequential body_{nullptr};
  torch::nn::Sequential up_{nullptr};
  torch::nn::Sequential skip_{nullptr};
  torch::nn::Conv2d out_{nullptr};
  static inline std::atomic<std::uint64_t> calls_{0};
};
TORCH_MODULE(Generator);

/// Patch discriminator: N x C x H x W -> N x 1 x H/4 x W/4 realness in (0, 1).
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const ArchConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  static std::uint64_t forward_count() { return calls_.load(); }
  static void reset_forward_count() { calls_ = 0; }

 private:
  ArchConfig cfg_;
  torch::nn::Sequential body_{nullptr};
  static inline std::atomic<std::uint64_t> calls_{0};
};
TORCH_MODULE(Discriminator);

/// Per-pixel modality classifier h: N x C x H x W -> N x 1 x H x W in (0, 1).
class DistributionClassifierImpl : public torch::nn::Module {
 public:
  explicit DistributionClassifierImpl(const ArchConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ArchConfig cfg_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(DistributionClassifier);

struct Network {
  Role role;
  ArchConfig arch;
  std::variant<TaskNet, Generator, Discriminator, DistributionClassifier> net;

  [[nodiscard]] std::shared_ptr<torch::nn::Module> module() const;
  [[nodiscard]] std::int64_t parameter_count() const;

  template <class T>
  [[nodiscard]] T& as() { return std::get<T>(net); }
};

/// Deterministic for a fixed arch.seed. Throws std::invalid_argument on
/// inconsistent channel configuration.
Network build(Role role, const ArchConfig& arch);

void freeze(torch::nn::Module& m);
void unfreeze(torch::nn::Module& m);
bool is_frozen(const torch::nn::Module& m);

std::int64_t parameter_count(const torch::nn::Module& m);

}  // namespace evd::models
