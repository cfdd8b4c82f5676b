#pragma once

// Training objectives. Every function returns a differentiable scalar tensor;
// gradients come from autograd.
//
// Shapes: segmentation logits are N x K x H x W (softmax over dim 1),
// recognition logits N x K. Reductions are means over batch and pixels.

#include <functional>
#include <stdexcept>

#include <torch/torch.h>

namespace evd::losses {

struct LossWeights {
  double lambda_da = 0.1;   // distribution adaptation
  double lambda_ag = 1.0;   // affinity graph
  double lambda_md = 1.0;   // mutual distillation
  double tau = 4.0;         // mutual-distillation temperature
  int sigma = 9;            // affinity neighborhood size (k x k stencil, self included)
  double pixelwise = 1.0;   // weight of the APS pixel-wise term inside the reconstruction loss
  double cycle = 10.0;      // weight of the cycle term inside the reconstruction loss
  double adversarial = 1.0; // weight of the adversarial term inside the reconstruction loss

  /// Throws std::invalid_argument when a weight is negative or non-finite,
  /// tau <= 0, or sigma is not the square of an odd number.
  void validate() const;
};

torch::Tensor l1_pixelwise(const torch::Tensor& generated, const torch::Tensor& target);

struct AdversarialLosses {
  torch::Tensor generator;      // mean -log D(fake)
  torch::Tensor discriminator;  // mean -log D(real) + mean -log(1 - D(fake))
};

/// Scores must be probabilities strictly inside (0, 1).
AdversarialLosses adversarial_losses(const torch::Tensor& real_scores,
                                     const torch::Tensor& fake_scores);

/// L1 between an input and its round trip through both generators.
torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_reconstructed);

/// KL(softmax(p / tau) || softmax(q / tau)), averaged over pixels (spatial) or batch.
torch::Tensor kl_divergence(const torch::Tensor& p_logits, const torch::Tensor& q_logits,
                            double tau = 1.0, bool spatial = true);

/// KL[T(G(e)) || S_ev(e)]; the gradient reaches the generator through the teacher logits.
torch::Tensor dsc_loss(const torch::Tensor& teacher_on_reconstruction,
                       const torch::Tensor& student_on_events);

/// KL[S_aps(x_aps) || T(x_aps)] + KL[S_aps(x_s) || T(x_s)]. With l1_mode the
/// KL terms become mean absolute differences of the softmax outputs.
torch::Tensor da_aps_loss(const torch::Tensor& student_on_aps, const torch::Tensor& teacher_on_aps,
                          const torch::Tensor& student_on_source,
                          const torch::Tensor& teacher_on_source, bool l1_mode = false);

/// KL[T(x_aps) || S_ev(e)] on a paired event / APS sample.
torch::Tensor da_ev_loss(const torch::Tensor& teacher_on_aps, const torch::Tensor& student_on_events);

using Classifier = std::function<torch::Tensor(const torch::Tensor&)>;

struct MatchLosses {
  torch::Tensor classifier;  // L_h: h learns source (d = 0) vs target (d = 1); features detached
  torch::Tensor task;        // L_F: same classifier with flipped labels, gradient to the features
};

/// Per-pixel modality classification conditioned on class probabilities
/// (concatenated to the features; probabilities are pooled to the feature
/// grid and never receive gradient).
MatchLosses da_match_losses(const torch::Tensor& features_source,
                            const torch::Tensor& features_target,
                            const torch::Tensor& class_probs_source,
                            const torch::Tensor& class_probs_target, const Classifier& h);

enum class Aggregation { none, mean, max };

struct AffinityGraph {
  torch::Tensor affinities;  // N x (H*W) x sigma, cosine similarities
  torch::Tensor neighbors;   // (H*W) x sigma node indices (border clamped), int64
  int sigma = 0;
};

/// Node features are aggregated over the k x k neighborhood (border clamped),
/// then A_uv = cos(F_u, F_v) for the sigma neighbors v of u. Zero vectors give 0.
AffinityGraph affinity_graph(const torch::Tensor& features, int sigma,
                             Aggregation aggregation = Aggregation::mean);

/// (1 / (H W sigma)) sum_u sum_v (A_uv^T - A_uv^S)^2, averaged over the batch.
torch::Tensor ag_loss(const torch::Tensor& teacher_features, const torch::Tensor& student_features,
                      int sigma = 9, Aggregation aggregation = Aggregation::mean);

/// tau^2 [KL(a || b) + KL(b || a)] on temperature-softened predictions.
torch::Tensor md_loss(const torch::Tensor& a_logits, const torch::Tensor& b_logits, double tau);

/// Mean over non-ignored pixels; 0 when every pixel is ignored.
torch::Tensor cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                            int64_t ignore_index = -1);

/// Undefined tensors are treated as absent terms.
struct LossParts {
  torch::Tensor ce;
  torch::Tensor bmr_pixelwise;
  torch::Tensor bmr_adversarial;
  torch::Tensor bmr_cycle;
  torch::Tensor bmr_dsc;
  torch::Tensor da_aps;
  torch::Tensor da_ev;
  torch::Tensor da_match;
  torch::Tensor ag;
  torch::Tensor md;
};

/// L = CE + L_BMR + lambda_da * L_DA + lambda_ag * L_AG + lambda_md * L_MD with
/// L_BMR = pixelwise * pw + adversarial * adv + cycle * cyc + dsc and
/// L_DA = da_aps + da_ev + da_match. Zero-weighted groups are not added.
torch::Tensor total_objective(const LossParts& parts, const LossWeights& weights);

/// Reconstruction-loss part of total_objective alone.
torch::Tensor bmr_objective(const LossParts& parts, const LossWeights& weights);

}  // namespace evd::losses
