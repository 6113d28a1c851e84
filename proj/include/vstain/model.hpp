// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <vector>

#include "vstain/backbone.hpp"
#include "vstain/config.hpp"
#include "vstain/discriminator.hpp"
#include "vstain/generator.hpp"
#include "vstain/losses.hpp"
#include "vstain/stain.hpp"

namespace vstain {

struct ModelConfig {
  GeneratorConfig generator;
  ProcessorConfig processor;
  DiscriminatorConfig discriminator;
  int64_t token_grid = 32;
  bool use_uni = true;     // false: spatial conditioning always zero
  bool cls_grid = false;   // true: tokens pooled to 4x4 before the processor
};

ModelConfig model_config_from(const Config& cfg);
StainConfig stain_config_from(const Config& cfg);
LossWeights loss_weights_from(const Config& cfg);
std::unique_ptr<Backbone> make_backbone(const Config& cfg);

/// Trainable generator side: feature processor plus generator.
class StainNet : public Module {
 public:
  StainNet(const ModelConfig& cfg, Rng& rng);
  /// hne: [N,3,R,R] signed; tokens: [N,d,G,G].
  Var forward(const Var& hne, const Tensor& tokens, const std::vector<int>& ids, const std::vector<bool>& drop_uni,
              const std::vector<bool>& drop_cls) const;
  const ModelConfig& config() const { return cfg_; }

  FeatureProcessor processor;
  Generator generator;

 private:
  ModelConfig cfg_;
};

/// Token grid used by the processor after the optional 4x4 pooling ablation.
Tensor prepare_tokens(const Tensor& tokens, bool cls_grid);

}  // namespace vstain
