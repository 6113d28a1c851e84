// SPDX-License-Identifier: Apache-2.0
#include "vstain/model.hpp"

#include "vstain/errors.hpp"
#include "vstain/vit.hpp"

namespace vstain {

ModelConfig model_config_from(const Config& cfg) {
  ModelConfig m;
  GeneratorConfig& g = m.generator;
  g.resolution = cfg.get_int("model.resolution");
  g.encoder_channels = cfg.get_int_list("model.encoder_channels");
  g.bottleneck_blocks = static_cast<int>(cfg.get_int("model.bottleneck_blocks"));
  g.attention = cfg.get_bool("model.attention");
  g.embedding_dim = cfg.get_int("model.embedding_dim");
  g.num_classes = static_cast<int>(cfg.get_int("model.num_classes"));
  g.edge_channels = cfg.get_int("model.edge_channels");
  g.head_channels = cfg.get_int("model.head_channels");
  g.spade_hidden = cfg.get_int("model.spade_hidden");
  g.cond_channels = cfg.get_int("processor.channels");
  g.num_cond_scales = g.depth() - 1;
  g.edge_encoder = cfg.get_bool("ablation.edge_encoder");
  try {
    g.validate();
    if (cfg.get_bool("model.variant_1024")) g = build_1024_variant(g);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  ProcessorConfig& p = m.processor;
  p.token_dim = cfg.get_int("backbone.token_dim");
  p.channels = cfg.get_int("processor.channels");
  p.residual_blocks = static_cast<int>(cfg.get_int("processor.residual_blocks"));
  p.groups = cfg.get_int("processor.groups");
  p.num_scales = g.num_cond_scales;
  if (p.channels % p.groups != 0) throw ConfigError("processor.channels must be divisible by processor.groups");

  DiscriminatorConfig& d = m.discriminator;
  d.scales = static_cast<int>(cfg.get_int("disc.scales"));
  d.channels = cfg.get_int_list("disc.channels");
  d.r1_gamma = cfg.get_double("disc.r1_gamma");
  for (auto l : cfg.get_int_list("disc.fm_layers")) d.fm_layers.push_back(static_cast<int>(l));

  m.token_grid = cfg.get_int("backbone.grid");
  if (m.token_grid != g.cond_grid())
    throw ConfigError("backbone.grid " + std::to_string(m.token_grid) + " must equal the coarsest SPADE stage side " +
                      std::to_string(g.cond_grid()));
  m.use_uni = cfg.get_bool("ablation.uni_features");
  m.cls_grid = cfg.get_bool("ablation.cls_grid");
  if (m.cls_grid && m.token_grid % 4 != 0) throw ConfigError("ablation.cls_grid needs backbone.grid divisible by 4");
  return m;
}

StainConfig stain_config_from(const Config& cfg) {
  StainConfig s;
  const auto m = cfg.get_double_list("stain.matrix");
  if (m.size() != 9) throw ConfigError("stain.matrix must hold 9 numbers (three rows)");
  const Vec3 h{m[0], m[1], m[2]}, r{m[3], m[4], m[5]}, dab{m[6], m[7], m[8]};
  try {
    s.matrix = (r[0] == 0.0 && r[1] == 0.0 && r[2] == 0.0) ? StainMatrix::from_two(h, dab) : StainMatrix(Mat3{h, r, dab});
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("stain.matrix: ") + e.what());
  }
  s.od_eps = cfg.get_double("stain.od_eps");
  const auto range = cfg.get_double_list("stain.hist_range");
  if (range.size() != 2 || !(range[1] > range[0])) throw ConfigError("stain.hist_range must be [lo, hi] with hi > lo");
  s.hist_lo = range[0];
  s.hist_hi = range[1];
  s.hist_bins = static_cast<int>(cfg.get_int("stain.hist_bins"));
  s.hist_smoothing = cfg.get_double("stain.hist_smoothing");
  s.top_fraction = cfg.get_double("stain.top_fraction");
  const auto dir = cfg.get_string("stain.kl_direction");
  if (dir == "real_gen")
    s.kl_direction = KlDirection::kRealGen;
  else if (dir == "gen_real")
    s.kl_direction = KlDirection::kGenReal;
  else
    throw ConfigError("stain.kl_direction must be real_gen or gen_real");
  if (!(s.od_eps > 0.0) || !(s.hist_smoothing > 0.0) || s.hist_bins < 1 || !(s.top_fraction > 0.0 && s.top_fraction <= 1.0))
    throw ConfigError("stain settings out of range");
  return s;
}

LossWeights loss_weights_from(const Config& cfg) {
  LossWeights w;
  w.percept = cfg.get_bool("ablation.lpips") ? cfg.get_double("loss.lambda_percept") : 0.0;
  w.l1 = cfg.get_double("loss.lambda_l1");
  w.edge = cfg.get_double("loss.lambda_edge");
  const bool disc = cfg.get_bool("ablation.discriminator");
  w.adv = disc ? cfg.get_double("loss.lambda_adv") : 0.0;
  w.fm = disc && cfg.get_bool("ablation.feature_matching") ? cfg.get_double("loss.lambda_fm") : 0.0;
  w.dab = cfg.get_bool("ablation.dab_loss") ? cfg.get_double("loss.lambda_dab") : 0.0;
  for (double v : {w.percept, w.l1, w.edge, w.adv, w.fm, w.dab})
    if (!(v >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  return w;
}

std::unique_ptr<Backbone> make_backbone(const Config& cfg) {
  const auto kind = cfg.get_string("backbone.kind");
  if (kind == "toy")
    return std::make_unique<ToyBackbone>(static_cast<uint64_t>(cfg.get_int("backbone.seed")), cfg.get_int("backbone.token_dim"),
                                         cfg.get_int("backbone.native_side"), cfg.get_int("backbone.patch"));
  if (kind == "pretrained") {
    const auto path = cfg.get_path("backbone.weights");
    if (path.empty()) throw ConfigError("backbone.kind=pretrained requires backbone.weights");
    auto vit = std::make_unique<VitBackbone>(path, cfg.get_int("backbone.native_side"));
    if (vit->token_dim() != cfg.get_int("backbone.token_dim"))
      throw ConfigError("backbone.token_dim does not match the pretrained weights (" + std::to_string(vit->token_dim()) + ")");
    return vit;
  }
  throw ConfigError("backbone.kind must be toy or pretrained");
}

Tensor prepare_tokens(const Tensor& tokens, bool cls_grid) {
  if (!cls_grid) return tokens;
  const int64_t g = tokens.dim(2);
  Tensor coarse = adaptive_avg_pool2d(tokens, 4, 4);
  NoGradGuard guard;
  return upsample_nearest2d(Var(coarse), static_cast<int>(g / 4)).value();
}

StainNet::StainNet(const ModelConfig& cfg, Rng& rng) : processor(cfg.processor, rng), generator(cfg.generator, rng), cfg_(cfg) {
  add_child("processor", processor);
  add_child("generator", generator);
}

Var StainNet::forward(const Var& hne, const Tensor& tokens, const std::vector<int>& ids, const std::vector<bool>& drop_uni,
                      const std::vector<bool>& drop_cls) const {
  Conditioning c;
  c.maps = processor.forward(Var(prepare_tokens(tokens, cfg_.cls_grid)));
  c.tokens = ids;
  c.drop_uni = cfg_.use_uni ? drop_uni : std::vector<bool>(ids.size(), true);
  c.drop_cls = drop_cls;
  return generator.forward(hne, c);
}

}  // namespace vstain
