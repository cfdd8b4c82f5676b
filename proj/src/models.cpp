#include "evd/models.hpp"

#include <numeric>
#include <stdexcept>

namespace evd::models {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

const char* to_string(Role r) {
  switch (r) {
    case Role::teacher: return "teacher";
    case Role::student_ev: return "student_ev";
    case Role::student_aps: return "student_aps";
    case Role::gen: return "gen";
    case Role::disc: return "disc";
    case Role::dist_clf: return "dist_clf";
  }
  return "unknown";
}

Role role_from_string(const std::string& s) {
  for (Role r : {Role::teacher, Role::student_ev, Role::student_aps, Role::gen, Role::disc,
                 Role::dist_clf}) {
    if (s == to_string(r)) return r;
  }
  throw std::invalid_argument("unknown network role '" + s + "'");
}

namespace {

int groups_for(int channels) {
  for (int g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

nn::Sequential conv_block(int in, int out, int stride = 1) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)),
                        nn::GroupNorm(nn::GroupNormOptions(groups_for(out), out)),
                        nn::ReLU());
}

torch::Tensor squeeze_prob(const torch::Tensor& z) {
  return kProbEps + (1.0 - 2.0 * kProbEps) * torch::sigmoid(z);
}

torch::Tensor upsample_to(const torch::Tensor& x, const torch::Tensor& like) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{like.size(2), like.size(3)})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

void check_common(const ArchConfig& a) {
  if (a.in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
  if (a.base_width < 1) throw std::invalid_argument("base_width must be >= 1");
}

}  // namespace

const torch::Tensor& TaskOutput::feature(const std::string& name) const {
  for (const auto& [n, t] : features) {
    if (n == name) return t;
  }
  throw std::invalid_argument("no feature tap named '" + name + "'");
}

TaskNetImpl::TaskNetImpl(const ArchConfig& cfg) : cfg_(cfg) {
  check_common(cfg);
  if (cfg.stages < 2) throw std::invalid_argument("task network needs at least 2 stages");
  if (cfg.out_channels < 1) throw std::invalid_argument("class count must be >= 1");
  widths_.push_back(cfg.base_width);
  for (int i = 1; i < cfg.stages; ++i) widths_.push_back(cfg.base_width << std::max(0, i - 1));

  encoder_ = register_module("encoder", nn::ModuleList());
  encoder_->push_back(conv_block(cfg.in_channels, widths_[0]));
  for (int i = 1; i < cfg.stages; ++i) {
    auto block = conv_block(widths_[i - 1], widths_[i], 2);
    block->extend(*conv_block(widths_[i], widths_[i]));
    encoder_->push_back(block);
  }
  if (cfg.head == Head::segmentation) {
    decoder_ = register_module("decoder", nn::ModuleList());
    for (int i = cfg.stages - 2; i >= 0; --i) {
      decoder_->push_back(conv_block(widths_[i + 1] + widths_[i], widths_[i]));
    }
    seg_head_ = register_module("seg_head", nn::Conv2d(nn::Conv2dOptions(widths_[0], cfg.out_channels, 1)));
  } else {
    cls_head_ = register_module("cls_head", nn::Linear(widths_.back(), cfg.out_channels));
  }
}

std::vector<std::string> TaskNetImpl::tap_names() const {
  std::vector<std::string> names{"stem"};
  for (int i = 1; i < cfg_.stages; ++i) names.push_back("enc" + std::to_string(i));
  if (cfg_.head == Head::segmentation) {
    for (int i = cfg_.stages - 2; i >= 0; --i) names.push_back("dec" + std::to_string(i));
  }
  return names;
}

int TaskNetImpl::feature_channels(const std::string& tap) const {
  if (tap == "stem") return widths_[0];
  if (tap.size() > 3 && (tap.rfind("enc", 0) == 0 || tap.rfind("dec", 0) == 0)) {
    const int i = std::stoi(tap.substr(3));
    if (i >= 0 && i < cfg_.stages) {
      if (tap[0] == 'e' && i >= 1) return widths_[static_cast<std::size_t>(i)];
      if (tap[0] == 'd' && i <= cfg_.stages - 2 && cfg_.head == Head::segmentation) {
        return widths_[static_cast<std::size_t>(i)];
      }
    }
  }
  throw std::invalid_argument("no feature tap named '" + tap + "'");
}

TaskOutput TaskNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw std::invalid_argument("task network expects N x " + std::to_string(cfg_.in_channels) +
                                " x H x W input");
  }
  const int64_t stride = cfg_.stride_factor();
  if (x.size(2) % stride != 0 || x.size(3) % stride != 0) {
    throw std::invalid_argument("input H and W must be divisible by " + std::to_string(stride));
  }
  TaskOutput out;
  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  for (std::size_t i = 0; i < encoder_->size(); ++i) {
    h = encoder_[i]->as<nn::Sequential>()->forward(h);
    skips.push_back(h);
    out.features.emplace_back(i == 0 ? "stem" : "enc" + std::to_string(i), h);
  }
  if (cfg_.head == Head::recognition) {
    out.logits = cls_head_->forward(h.mean({2, 3}));
    return out;
  }
  for (std::size_t j = 0; j < decoder_->size(); ++j) {
    const std::size_t level = skips.size() - 2 - j;
    h = torch::cat({upsample_to(h, skips[level]), skips[level]}, 1);
    h = decoder_[j]->as<nn::Sequential>()->forward(h);
    out.features.emplace_back("dec" + std::to_string(level), h);
  }
  out.logits = seg_head_->forward(h);
  return out;
}

GeneratorImpl::GeneratorImpl(const ArchConfig& cfg) : cfg_(cfg) {
  check_common(cfg);
  if (cfg.out_channels < 1) throw std::invalid_argument("generator needs >= 1 output channel");
  const int w = cfg.base_width;
  skip_ = register_module("skip", conv_block(cfg.in_channels, w));
  down_ = register_module("down", conv_block(w, 2 * w, 2));
  auto body = conv_block(2 * w, 2 * w);
  body->extend(*conv_block(2 * w, 2 * w));
  body_ = register_module("body", body);
  up_ = register_module("up", conv_block(2 * w + w, w));
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(w, cfg.out_channels, 3).padding(1)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) {
  ++calls_;
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw std::invalid_argument("generator expects N x " + std::to_string(cfg_.in_channels) +
                                " x H x W input");
  }
  if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
    throw std::invalid_argument("generator input H and W must be even");
  }
  const torch::Tensor s = skip_->forward(x);
  torch::Tensor h = down_->forward(s);
  h = h + body_->forward(h);
  h = up_->forward(torch::cat({upsample_to(h, s), s}, 1));
  h = out_->forward(h);
  return cfg_.codomain == Codomain::unit_interval ? torch::sigmoid(h) : h;
}

DiscriminatorImpl::DiscriminatorImpl(const ArchConfig& cfg) : cfg_(cfg) {
  check_common(cfg);
  const int w = cfg.base_width;
  body_ = register_module(
      "body",
      nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.in_channels, w, 4).stride(2).padding(1)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                     nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 4).stride(2).padding(1)),
                     nn::GroupNorm(nn::GroupNormOptions(groups_for(2 * w), 2 * w)),
                     nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                     nn::Conv2d(nn::Conv2dOptions(2 * w, 1, 3).padding(1))));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  ++calls_;
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw std::invalid_argument("discriminator expects N x " + std::to_string(cfg_.in_channels) +
                                " x H x W input");
  }
  return squeeze_prob(body_->forward(x));
}

DistributionClassifierImpl::DistributionClassifierImpl(const ArchConfig& cfg) : cfg_(cfg) {
  check_common(cfg);
  const int w = cfg.base_width;
  body_ = register_module(
      "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.in_channels, w, 1)),
                             nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                             nn::Conv2d(nn::Conv2dOptions(w, w, 1)),
                             nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                             nn::Conv2d(nn::Conv2dOptions(w, 1, 1))));
}

torch::Tensor DistributionClassifierImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw std::invalid_argument("distribution classifier expects N x " +
                                std::to_string(cfg_.in_channels) + " x H x W input");
  }
  return squeeze_prob(body_->forward(x));
}

std::shared_ptr<torch::nn::Module> Network::module() const {
  return std::visit([](const auto& h) -> std::shared_ptr<torch::nn::Module> { return h.ptr(); }, net);
}

std::int64_t Network::parameter_count() const { return models::parameter_count(*module()); }

Network build(Role role, const ArchConfig& arch) {
  torch::manual_seed(arch.seed);
  switch (role) {
    case Role::teacher:
    case Role::student_ev:
    case Role::student_aps: return Network{role, arch, TaskNet(arch)};
    case Role::gen: return Network{role, arch, Generator(arch)};
    case Role::disc: return Network{role, arch, Discriminator(arch)};
    case Role::dist_clf: return Network{role, arch, DistributionClassifier(arch)};
  }
  throw std::invalid_argument("unknown role");
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
}

void unfreeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(true);
}

bool is_frozen(const torch::nn::Module& m) {
  for (const auto& p : m.parameters()) {
    if (p.requires_grad()) return false;
  }
  return true;
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace evd::models
