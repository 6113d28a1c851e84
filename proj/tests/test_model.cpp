// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "test_util.hpp"
#include "vstain/errors.hpp"
#include "vstain/model.hpp"

using namespace vstain;
namespace fs = std::filesystem;

namespace {

Config desk() { return Config::load(fs::path(VSTAIN_SOURCE_DIR) / "configs/desk.json"); }

}  // namespace

TEST_CASE("desk and canonical geometry") {
  const ModelConfig m = model_config_from(desk());
  CHECK(m.generator.resolution == 64);
  CHECK(m.generator.num_cond_scales == 3);
  CHECK(m.generator.cond_grid() == 8);
  CHECK(m.processor.num_scales == 3);
  CHECK(m.processor.token_dim == 64);
  CHECK(m.generator.cond_channels == m.processor.channels);

  const ModelConfig c = model_config_from(Config::load(fs::path(VSTAIN_SOURCE_DIR) / "configs/canonical.json"));
  CHECK(c.generator.resolution == 512);
  CHECK(c.generator.cond_grid() == 32);
  CHECK(c.generator.num_cond_scales == 4);
  CHECK(c.generator.stage_side(c.generator.num_cond_scales - 1) == 256);

  Config v = desk();
  v.set_from_string("model.variant_1024", "true");
  const ModelConfig big = model_config_from(v);
  CHECK(big.generator.resolution == 128);
  CHECK(big.generator.cond_grid() == 8);
}

TEST_CASE("inconsistent settings are configuration errors") {
  Config c = desk();
  c.set_from_string("backbone.grid", "16");
  CHECK_THROWS_WITH_AS(model_config_from(c), doctest::Contains("backbone.grid"), ConfigError);
  c = desk();
  c.set_from_string("model.resolution", "60");
  CHECK_THROWS_AS(model_config_from(c), ConfigError);
  c = desk();
  c.set_from_string("processor.groups", "5");
  CHECK_THROWS_AS(model_config_from(c), ConfigError);
  c = desk();
  c.set_from_string("stain.kl_direction", "sideways");
  CHECK_THROWS_AS(stain_config_from(c), ConfigError);
  c = desk();
  c.set_from_string("stain.matrix", "1,0,0,2,0,0,0,0,1");
  CHECK_THROWS_AS(stain_config_from(c), ConfigError);
  c = desk();
  c.set_from_string("backbone.kind", "pretrained");
  CHECK_THROWS_AS(make_backbone(c), ConfigError);
  c.set_from_string("backbone.kind", "mystery");
  CHECK_THROWS_AS(make_backbone(c), ConfigError);
}

TEST_CASE("ablations zero their loss weights") {
  Config c = desk();
  LossWeights w = loss_weights_from(c);
  CHECK(w.percept == 1.0);
  CHECK(w.fm == 10.0);
  CHECK(w.dab == 0.2);
  c.set_from_string("ablation.lpips", "false");
  c.set_from_string("ablation.dab_loss", "false");
  c.set_from_string("ablation.feature_matching", "false");
  w = loss_weights_from(c);
  CHECK(w.percept == 0.0);
  CHECK(w.dab == 0.0);
  CHECK(w.fm == 0.0);
  CHECK(w.adv == 1.0);
  c = desk();
  c.set_from_string("ablation.discriminator", "false");
  w = loss_weights_from(c);
  CHECK(w.adv == 0.0);
  CHECK(w.fm == 0.0);
}

TEST_CASE("stain configuration from the default matrix") {
  const StainConfig s = stain_config_from(desk());
  const StainMatrix ref = StainMatrix::h_dab();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(s.matrix.rows()[i][j] == doctest::Approx(ref.rows()[i][j]));
  CHECK(s.hist_bins == 256);
  CHECK(s.kl_direction == KlDirection::kRealGen);
}

TEST_CASE("toy backbone from config feeds the processor grid") {
  const Config c = desk();
  const auto bb = make_backbone(c);
  CHECK(bb->token_dim() == 64);
  const Tensor tok = extract_subcrop_tokens(testutil::random_tensor(Shape{1, 3, 64, 64}, 1, 0.0f, 1.0f), *bb,
                                            c.get_int("backbone.grid"));
  CHECK(tok.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("pooled-grid ablation averages 4x4 cells") {
  const Tensor t = testutil::random_tensor(Shape{1, 2, 8, 8}, 2);
  const Tensor p = prepare_tokens(t, true);
  REQUIRE(p.shape() == t.shape());
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) {
        double m = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) m += t[(c * 8 + (y / 2) * 2 + dy) * 8 + (x / 2) * 2 + dx];
        CHECK(p[(c * 8 + y) * 8 + x] == doctest::Approx(m / 4.0).epsilon(1e-6));
      }
  CHECK(std::memcmp(prepare_tokens(t, false).data(), t.data(), t.numel() * sizeof(float)) == 0);
}

TEST_CASE("stain net is invariant to conditioning at initialization") {
  const ModelConfig m = model_config_from(desk());
  Rng rng(3);
  const StainNet net(m, rng);
  const Var x(testutil::random_tensor(Shape{2, 3, 64, 64}, 4));
  const Tensor a = net.forward(x, testutil::random_tensor(Shape{2, 64, 8, 8}, 5), {0, 1}, {false, false}, {false, false}).value();
  const Tensor b = net.forward(x, testutil::random_tensor(Shape{2, 64, 8, 8}, 6), {3, 2}, {false, true}, {true, false}).value();
  CHECK(std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0);
}

TEST_CASE("disabling spatial features forces the zero map") {
  Config c = desk();
  c.set_from_string("ablation.uni_features", "false");
  const ModelConfig m = model_config_from(c);
  Rng rng(7);
  StainNet net(m, rng);
  for (auto& [name, p] : net.parameters())
    if (name.find(".gamma.") != std::string::npos || name.find(".beta.") != std::string::npos) {
      Var h = p;
      h.value_mut() = testutil::random_tensor(p.shape(), 8, -0.2f, 0.2f);
    }
  const Var x(testutil::random_tensor(Shape{1, 3, 64, 64}, 9));
  const Tensor a = net.forward(x, testutil::random_tensor(Shape{1, 64, 8, 8}, 10), {1}, {false}, {false}).value();
  const Tensor b = net.forward(x, testutil::random_tensor(Shape{1, 64, 8, 8}, 11), {1}, {false}, {false}).value();
  CHECK(std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0);
}
