// SPDX-License-Identifier: Apache-2.0
#include "vstain/discriminator.hpp"

#include <stdexcept>
#include <string>

namespace vstain {

Discriminator::Discriminator(const DiscriminatorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.scales < 1) throw std::invalid_argument("discriminator: scales must be positive");
  if (cfg.channels.empty()) throw std::invalid_argument("discriminator: channels must not be empty");
  if (cfg.r1_gamma < 0.0) throw std::invalid_argument("discriminator: r1_gamma must be nonnegative");
  for (int s = 0; s < cfg.scales; ++s) {
    std::vector<std::unique_ptr<Conv2d>> convs;
    int64_t prev = 3;
    for (size_t l = 0; l < cfg.channels.size(); ++l) {
      convs.push_back(std::make_unique<Conv2d>(prev, cfg.channels[l], 4, 2, 1, true, rng));
      prev = cfg.channels[l];
    }
    convs.push_back(std::make_unique<Conv2d>(prev, 1, 3, 1, 1, true, rng));
    layers_.push_back(std::move(convs));
    for (size_t l = 0; l < layers_.back().size(); ++l)
      add_child("scale" + std::to_string(s) + "." + std::to_string(l), *layers_.back()[l]);
  }
}

DiscriminatorOutput Discriminator::forward(const Var& img) const {
  require_rank(img.value(), 4, "discriminator input");
  DiscriminatorOutput out;
  Var x = img;
  for (int s = 0; s < cfg_.scales; ++s) {
    if (s > 0) x = avg_pool2d(x, 2);
    ScaleOutput so;
    Var h = x;
    const auto& convs = layers_[static_cast<size_t>(s)];
    for (size_t l = 0; l + 1 < convs.size(); ++l) {
      h = leaky_relu(convs[l]->forward(h), 0.2f);
      so.features.push_back(h);
    }
    so.logits = convs.back()->forward(h);
    out.push_back(std::move(so));
  }
  return out;
}

std::vector<Var> logits_of(const DiscriminatorOutput& out) {
  std::vector<Var> v;
  for (const auto& s : out) v.push_back(s.logits);
  return v;
}

std::vector<std::vector<Var>> features_of(const DiscriminatorOutput& out) {
  std::vector<std::vector<Var>> v;
  for (const auto& s : out) v.push_back(s.features);
  return v;
}

Var hinge_d_loss(const std::vector<Var>& real_logits, const std::vector<Var>& fake_logits) {
  if (real_logits.size() != fake_logits.size() || real_logits.empty())
    throw std::invalid_argument("hinge_d_loss: scale count mismatch");
  Var total;
  for (size_t s = 0; s < real_logits.size(); ++s) {
    Var term = add(mean(relu(add_scalar(scale(real_logits[s], -1.0f), 1.0f))),
                   mean(relu(add_scalar(fake_logits[s], 1.0f))));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0f / static_cast<float>(real_logits.size()));
}

Var hinge_g_loss(const std::vector<Var>& fake_logits) {
  if (fake_logits.empty()) throw std::invalid_argument("hinge_g_loss: no scales");
  Var total;
  for (const auto& l : fake_logits) {
    Var term = scale(mean(l), -1.0f);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0f / static_cast<float>(fake_logits.size()));
}

Var r1_penalty(const Discriminator& d, const Tensor& real, double gamma) {
  Var x(real, true);
  Var total;
  for (const auto& l : logits_of(d.forward(x))) total = total.defined() ? add(total, sum(l)) : sum(l);
  Var g = grad(total, {x}, true)[0];
  return scale(sum(square(g)), static_cast<float>(gamma / (2.0 * static_cast<double>(real.dim(0)))));
}

Var feature_matching_loss(const std::vector<std::vector<Var>>& fake, const std::vector<std::vector<Var>>& real,
                          const std::vector<int>& layers) {
  if (fake.size() != real.size() || fake.empty()) throw std::invalid_argument("feature_matching_loss: scale count mismatch");
  Var total;
  for (size_t s = 0; s < fake.size(); ++s) {
    if (fake[s].size() != real[s].size())
      throw std::invalid_argument("feature_matching_loss: layer count mismatch at scale " + std::to_string(s));
    std::vector<int> use = layers;
    if (use.empty())
      for (size_t l = 0; l < fake[s].size(); ++l) use.push_back(static_cast<int>(l));
    for (int l : use) {
      if (l < 0 || static_cast<size_t>(l) >= fake[s].size())
        throw std::invalid_argument("feature_matching_loss: layer " + std::to_string(l) + " out of range");
      Var term = mean(abs(sub(fake[s][l], real[s][l].detach())));
      total = total.defined() ? add(total, term) : term;
    }
  }
  return scale(total, 1.0f / static_cast<float>(fake.size()));
}

}  // namespace vstain
