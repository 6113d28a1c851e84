// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <vector>

#include "vstain/nn.hpp"

namespace vstain {

struct DiscriminatorConfig {
  int scales = 2;
  std::vector<int64_t> channels{64, 128, 256, 512};
  double r1_gamma = 1.0;
  /// Feature layers used for feature matching; empty means all.
  std::vector<int> fm_layers;
};

struct ScaleOutput {
  Var logits;                 // [N,1,h,w]
  std::vector<Var> features;  // post-activation maps of every strided layer
};
using DiscriminatorOutput = std::vector<ScaleOutput>;

/// Unconditional multi-scale PatchGAN; scale k sees the image average-pooled
/// by 2^k. Each scale has its own weights.
class Discriminator : public Module {
 public:
  Discriminator(const DiscriminatorConfig& cfg, Rng& rng);
  DiscriminatorOutput forward(const Var& img) const;
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<std::vector<std::unique_ptr<Conv2d>>> layers_;  // [scale][layer], last is the logit conv
};

std::vector<Var> logits_of(const DiscriminatorOutput& out);
std::vector<std::vector<Var>> features_of(const DiscriminatorOutput& out);

/// mean(relu(1 - real)) + mean(relu(1 + fake)), averaged over scales.
Var hinge_d_loss(const std::vector<Var>& real_logits, const std::vector<Var>& fake_logits);
/// -mean(fake), averaged over scales.
Var hinge_g_loss(const std::vector<Var>& fake_logits);
/// (gamma / 2) * batch mean of |d(sum of logits)/d x|^2 on real images.
Var r1_penalty(const Discriminator& d, const Tensor& real, double gamma);
/// Sum over layers of mean |fake - real|, mean over scales. `real` is
/// detached; `layers` selects feature indices (empty = all).
Var feature_matching_loss(const std::vector<std::vector<Var>>& fake, const std::vector<std::vector<Var>>& real,
                          const std::vector<int>& layers = {});

}  // namespace vstain
