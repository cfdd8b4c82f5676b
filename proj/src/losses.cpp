#include "evd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace evd::losses {
namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument(std::string(what) + ": undefined tensor");
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
}

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw std::invalid_argument(std::string(what) + ": non-finite values");
  }
}

int stencil_side(int sigma) {
  if (sigma < 1) throw std::invalid_argument("affinity: sigma must be >= 1");
  const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(sigma))));
  if (k * k != sigma || k % 2 == 0) {
    throw std::invalid_argument("affinity: sigma must be the square of an odd stencil side, got " +
                                std::to_string(sigma));
  }
  return k;
}

torch::Tensor as_batch(const torch::Tensor& t) { return t.dim() == 3 ? t.unsqueeze(0) : t; }

torch::Tensor replicate_pad(const torch::Tensor& x, int r) {
  if (r == 0) return x;
  return F::pad(x, F::PadFuncOptions({r, r, r, r}).mode(torch::kReplicate));
}

/// Pools class probabilities onto the feature grid and broadcasts recognition ones.
torch::Tensor probs_on_grid(const torch::Tensor& probs, const torch::Tensor& features) {
  torch::Tensor p = probs.detach();
  if (p.dim() == 2) {
    return p.unsqueeze(-1).unsqueeze(-1).expand({p.size(0), p.size(1), features.size(2), features.size(3)});
  }
  if (p.size(2) != features.size(2) || p.size(3) != features.size(3)) {
    p = F::adaptive_avg_pool2d(p, F::AdaptiveAvgPool2dFuncOptions({features.size(2), features.size(3)}));
  }
  return p;
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_da, lambda_ag, lambda_md, pixelwise, cycle, adversarial}) {
    if (!std::isfinite(v) || v < 0) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
  if (!std::isfinite(tau) || tau <= 0) throw std::invalid_argument("tau must be > 0");
  stencil_side(sigma);
}

torch::Tensor l1_pixelwise(const torch::Tensor& generated, const torch::Tensor& target) {
  require_same_shape(generated, target, "l1_pixelwise");
  return (generated - target).abs().mean();
}

AdversarialLosses adversarial_losses(const torch::Tensor& real, const torch::Tensor& fake) {
  for (const auto* t : {&real, &fake}) {
    if (!t->defined()) throw std::invalid_argument("adversarial_losses: undefined scores");
    const bool ok = ((*t > 0) & (*t < 1)).all().item<bool>();
    if (!ok) throw std::invalid_argument("adversarial_losses: scores must lie in (0, 1)");
  }
  AdversarialLosses out;
  out.generator = -torch::log(fake).mean();
  out.discriminator = -torch::log(real).mean() - torch::log1p(-fake).mean();
  return out;
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_reconstructed) {
  return l1_pixelwise(x_reconstructed, x);
}

torch::Tensor kl_divergence(const torch::Tensor& p_logits, const torch::Tensor& q_logits, double tau,
                            bool spatial) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  if (!(tau > 0)) throw std::invalid_argument("kl_divergence: tau must be > 0");
  if (spatial ? p_logits.dim() != 4 : p_logits.dim() != 2) {
    throw std::invalid_argument(spatial ? "kl_divergence: spatial logits must be N x K x H x W"
                                        : "kl_divergence: logits must be N x K");
  }
  require_finite(p_logits, "kl_divergence");
  require_finite(q_logits, "kl_divergence");
  const auto log_p = torch::log_softmax(p_logits / tau, 1);
  const auto log_q = torch::log_softmax(q_logits / tau, 1);
  return (log_p.exp() * (log_p - log_q)).sum(1).mean();
}

torch::Tensor dsc_loss(const torch::Tensor& teacher_on_reconstruction,
                       const torch::Tensor& student_on_events) {
  return kl_divergence(teacher_on_reconstruction, student_on_events, 1.0,
                       teacher_on_reconstruction.dim() == 4);
}

torch::Tensor da_aps_loss(const torch::Tensor& student_on_aps, const torch::Tensor& teacher_on_aps,
                          const torch::Tensor& student_on_source,
                          const torch::Tensor& teacher_on_source, bool l1_mode) {
  const bool spatial = student_on_aps.dim() == 4;
  if (l1_mode) {
    require_same_shape(student_on_aps, teacher_on_aps, "da_aps_loss");
    require_same_shape(student_on_source, teacher_on_source, "da_aps_loss");
    return l1_pixelwise(torch::softmax(student_on_aps, 1), torch::softmax(teacher_on_aps, 1)) +
           l1_pixelwise(torch::softmax(student_on_source, 1), torch::softmax(teacher_on_source, 1));
  }
  return kl_divergence(student_on_aps, teacher_on_aps, 1.0, spatial) +
         kl_divergence(student_on_source, teacher_on_source, 1.0, spatial);
}

torch::Tensor da_ev_loss(const torch::Tensor& teacher_on_aps, const torch::Tensor& student_on_events) {
  return kl_divergence(teacher_on_aps, student_on_events, 1.0, teacher_on_aps.dim() == 4);
}

MatchLosses da_match_losses(const torch::Tensor& fs, const torch::Tensor& ft, const torch::Tensor& ps,
                            const torch::Tensor& pt, const Classifier& h) {
  if (fs.dim() != 4 || ft.dim() != 4) throw std::invalid_argument("da_match: features must be N x C x H x W");
  if (fs.size(1) != ft.size(1) || fs.size(2) != ft.size(2) || fs.size(3) != ft.size(3)) {
    std::ostringstream os;
    os << "da_match: tap shape mismatch " << fs.sizes() << " vs " << ft.sizes();
    throw std::invalid_argument(os.str());
  }
  if (ps.size(1) != pt.size(1)) throw std::invalid_argument("da_match: class counts differ");
  const auto cond_s = probs_on_grid(ps, fs);
  const auto cond_t = probs_on_grid(pt, ft);
  const double n = static_cast<double>(fs.size(0) * fs.size(2) * fs.size(3) +
                                       ft.size(0) * ft.size(2) * ft.size(3));
  MatchLosses out;
  {
    const auto ds = h(torch::cat({fs.detach(), cond_s}, 1));
    const auto dt = h(torch::cat({ft.detach(), cond_t}, 1));
    out.classifier = (-torch::log1p(-ds).sum() - torch::log(dt).sum()) / n;
  }
  {
    const auto ds = h(torch::cat({fs, cond_s}, 1));
    const auto dt = h(torch::cat({ft, cond_t}, 1));
    out.task = (-torch::log(ds).sum() - torch::log1p(-dt).sum()) / n;
  }
  return out;
}

AffinityGraph affinity_graph(const torch::Tensor& features, int sigma, Aggregation aggregation) {
  const int k = stencil_side(sigma);
  const int r = k / 2;
  const torch::Tensor f = as_batch(features);
  if (f.dim() != 4) throw std::invalid_argument("affinity: features must be C x H x W or N x C x H x W");
  const int64_t h = f.size(2);
  const int64_t w = f.size(3);

  torch::Tensor agg = f;
  if (aggregation == Aggregation::mean && r > 0) {
    agg = F::avg_pool2d(replicate_pad(f, r), F::AvgPool2dFuncOptions(k).stride(1));
  } else if (aggregation == Aggregation::max && r > 0) {
    agg = F::max_pool2d(replicate_pad(f, r), F::MaxPool2dFuncOptions(k).stride(1));
  }
  const auto norm = torch::linalg_vector_norm(agg, 2, {1}, /*keepdim=*/true);
  const auto unit = agg / norm.clamp_min(1e-12);
  const auto padded = replicate_pad(unit, r);

  std::vector<torch::Tensor> per_offset;
  per_offset.reserve(static_cast<std::size_t>(sigma));
  auto idx = torch::empty({h * w, sigma}, torch::kInt64);
  auto ia = idx.accessor<int64_t, 2>();
  int o = 0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx, ++o) {
      const auto shifted = padded.index({Slice(), Slice(), Slice(r + dy, r + dy + h), Slice(r + dx, r + dx + w)});
      per_offset.push_back((unit * shifted).sum(1));
      for (int64_t y = 0; y < h; ++y) {
        const int64_t yy = std::clamp<int64_t>(y + dy, 0, h - 1);
        for (int64_t x = 0; x < w; ++x) {
          const int64_t xx = std::clamp<int64_t>(x + dx, 0, w - 1);
          ia[y * w + x][o] = yy * w + xx;
        }
      }
    }
  }
  AffinityGraph g;
  g.sigma = sigma;
  g.affinities = torch::stack(per_offset, 1).permute({0, 2, 3, 1}).reshape({f.size(0), h * w, sigma});
  g.neighbors = idx;
  return g;
}

torch::Tensor ag_loss(const torch::Tensor& teacher_features, const torch::Tensor& student_features,
                      int sigma, Aggregation aggregation) {
  const auto t = as_batch(teacher_features);
  const auto s = as_batch(student_features);
  if (t.dim() != 4 || s.dim() != 4 || t.size(0) != s.size(0) || t.size(2) != s.size(2) ||
      t.size(3) != s.size(3)) {
    std::ostringstream os;
    os << "ag_loss: spatial size mismatch " << t.sizes() << " vs " << s.sizes();
    throw std::invalid_argument(os.str());
  }
  const auto at = affinity_graph(t, sigma, aggregation).affinities;
  const auto as = affinity_graph(s, sigma, aggregation).affinities;
  return (at - as).pow(2).mean();
}

torch::Tensor md_loss(const torch::Tensor& a_logits, const torch::Tensor& b_logits, double tau) {
  const bool spatial = a_logits.dim() == 4;
  return tau * tau *
         (kl_divergence(a_logits, b_logits, tau, spatial) + kl_divergence(b_logits, a_logits, tau, spatial));
}

torch::Tensor cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                            int64_t ignore_index) {
  const auto target = labels.to(torch::kInt64);
  const auto valid = (target != ignore_index).sum().item<int64_t>();
  if (valid == 0) return (logits * 0).sum();
  return F::cross_entropy(logits, target, F::CrossEntropyFuncOptions().ignore_index(ignore_index));
}

namespace {

void add(torch::Tensor& acc, const torch::Tensor& term, double weight = 1.0) {
  if (!term.defined() || weight == 0.0) return;
  const auto t = weight == 1.0 ? term : term * weight;
  acc = acc.defined() ? acc + t : t;
}

}  // namespace

torch::Tensor bmr_objective(const LossParts& p, const LossWeights& w) {
  torch::Tensor acc;
  add(acc, p.bmr_pixelwise, w.pixelwise);
  add(acc, p.bmr_adversarial, w.adversarial);
  add(acc, p.bmr_cycle, w.cycle);
  add(acc, p.bmr_dsc);
  return acc;
}

torch::Tensor total_objective(const LossParts& p, const LossWeights& w) {
  torch::Tensor acc;
  add(acc, p.ce);
  add(acc, bmr_objective(p, w));
  torch::Tensor da;
  add(da, p.da_aps);
  add(da, p.da_ev);
  add(da, p.da_match);
  add(acc, da, w.lambda_da);
  add(acc, p.ag, w.lambda_ag);
  add(acc, p.md, w.lambda_md);
  return acc.defined() ? acc : torch::zeros({});
}

}  // namespace evd::losses
