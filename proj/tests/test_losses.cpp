// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "test_util.hpp"
#include "vstain/errors.hpp"
#include "vstain/losses.hpp"

using namespace vstain;

namespace {

/// Smooth, strictly positive features so finite differences are valid.
class SmoothExtractor : public PerceptualExtractor {
 public:
  std::vector<Var> features(const Var& img) const override {
    return {add_scalar(square(img), 0.5f), add_scalar(avg_pool2d(img, 2), 3.0f)};
  }
};

Var ones() { return Var(Tensor::scalar(1.0f)); }

LossTerms all_ones() { return LossTerms{ones(), ones(), ones(), ones(), ones(), ones()}; }

}  // namespace

TEST_CASE("total loss with unit components and default weights") {
  const LossWeights w;
  const int64_t adv_start = 2000;
  const auto before = total_generator_loss(all_ones(), w, adv_start - 1, adv_start);
  CHECK(before.total == doctest::Approx(2.7));
  CHECK(before.total_var.item() == doctest::Approx(2.7));
  const auto after = total_generator_loss(all_ones(), w, adv_start, adv_start);
  CHECK(after.total == doctest::Approx(13.7));
  CHECK(after.total_var.item() == doctest::Approx(13.7));
  // Gated components are still logged at their raw value.
  CHECK(before.component("fm") == 1.0);
  CHECK(before.component("adv") == 1.0);
  CHECK_THROWS_AS(before.component("nope"), std::out_of_range);
}

TEST_CASE("total loss gradient equals the weights") {
  LossTerms t;
  Var p(Tensor::scalar(0.3f), true), a(Tensor::scalar(0.7f), true), f(Tensor::scalar(0.1f), true);
  t.percept = p;
  t.adv = a;
  t.fm = f;
  LossWeights w;
  const auto gated = total_generator_loss(t, w, 0, 10);
  const auto g0 = grad(gated.total_var, {p, a, f}, true);
  CHECK(g0[0].item() == doctest::Approx(w.percept));
  CHECK((!g0[1].defined() || g0[1].item() == 0.0f));
  CHECK((!g0[2].defined() || g0[2].item() == 0.0f));
  const auto open = total_generator_loss(t, w, 10, 10);
  const auto g1 = grad(open.total_var, {p, a, f}, true);
  CHECK(g1[1].item() == doctest::Approx(w.adv));
  CHECK(g1[2].item() == doctest::Approx(w.fm));
  CHECK(open.total == doctest::Approx(0.3 * w.percept + 0.7 * w.adv + 0.1 * w.fm));
}

TEST_CASE("non-finite component is reported by name") {
  LossTerms t = all_ones();
  t.edge = Var(Tensor::scalar(std::nanf("")));
  try {
    total_generator_loss(t, LossWeights{}, 0, 0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("edge") != std::string::npos);
  }
}

TEST_CASE("area downsampling and l1 oracle") {
  const Tensor a = testutil::random_tensor(Shape{2, 3, 8, 8}, 1, 0.0f, 1.0f);
  const Tensor b = testutil::random_tensor(Shape{2, 3, 8, 8}, 2, 0.0f, 1.0f);
  double expected = 0.0;
  for (int64_t nc = 0; nc < 6; ++nc)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        double sa = 0.0, sb = 0.0;
        for (int dy = 0; dy < 4; ++dy)
          for (int dx = 0; dx < 4; ++dx) {
            const int64_t i = nc * 64 + (y * 4 + dy) * 8 + x * 4 + dx;
            sa += a[i];
            sb += b[i];
          }
        expected += std::abs(sa - sb) / 16.0;
      }
  expected /= 6.0 * 4.0;
  CHECK(l1_at(Var(a), Var(b), 2).item() == doctest::Approx(expected).epsilon(1e-5));
  CHECK(l1_at(Var(a), Var(a), 4).item() == 0.0f);
  const Var va(a);
  CHECK(area_downsample(va, 8).id() == va.id());
  CHECK_THROWS_AS(area_downsample(Var(a), 3), std::invalid_argument);
  CHECK_THROWS_AS(l1_at(Var(a), Var(Tensor(Shape{2, 3, 4, 4})), 2), std::invalid_argument);
}

TEST_CASE("edge loss ignores intensity offsets and sees structure") {
  const Tensor hne = testutil::random_tensor(Shape{1, 3, 16, 16}, 3);
  Tensor shifted = hne;
  for (auto& v : shifted.span()) v += 0.25f;
  CHECK(edge_loss(Var(shifted), Var(hne), {16, 8}).item() == doctest::Approx(0.0).epsilon(1e-5));
  const Tensor other = testutil::random_tensor(Shape{1, 3, 16, 16}, 4);
  CHECK(edge_loss(Var(other), Var(hne), {16, 8}).item() > 0.1f);
}

TEST_CASE("perceptual distance is zero for equal inputs and scale invariant") {
  const RandomConvExtractor ex(7);
  const Tensor a = testutil::random_tensor(Shape{2, 3, 16, 16}, 5);
  Tensor doubled = a;
  for (auto& v : doubled.span()) v *= 2.0f;
  CHECK(ex.distance(Var(a), Var(a)).item() == 0.0f);
  // Bias-free ReLU convs are positively homogeneous and features are
  // channel-normalized.
  CHECK(perceptual_loss(Var(a), Var(doubled), ex, {16, 8}, {1.0, 1.0}).item() < 1e-4f);
  const Tensor b = testutil::random_tensor(Shape{2, 3, 16, 16}, 6);
  const float d1 = perceptual_loss(Var(a), Var(b), ex, {16}, {1.0}).item();
  const float d2 = perceptual_loss(Var(a), Var(b), ex, {16}, {2.5}).item();
  CHECK(d1 > 0.0f);
  CHECK(d2 == doctest::Approx(2.5 * d1));
  CHECK_THROWS_AS(perceptual_loss(Var(a), Var(b), ex, {16, 8}, {1.0}), std::invalid_argument);
  CHECK(ex.features(Var(a)).size() == 3);
}

TEST_CASE("loss gradients") {
  const Tensor x = testutil::random_tensor(Shape{1, 3, 16, 16}, 8);
  const Tensor t = testutil::random_tensor(Shape{1, 3, 16, 16}, 9);
  // Channel normalization makes the ReLU extractor discontinuous where a
  // feature vector leaves zero, so the distance is checked on smooth features.
  const SmoothExtractor ex;
  CHECK(testutil::directional_check([&](const Var& v) { return perceptual_loss(v, Var(t), ex, {16, 8}, {1.0, 0.5}); },
                                    x, 1e-2) < 2e-2);
  CHECK(testutil::directional_check([&](const Var& v) { return l1_at(v, Var(t), 4); }, x, 1e-3) < 2e-2);
  CHECK(testutil::directional_check([&](const Var& v) { return edge_loss(v, Var(t), {16, 8}); }, x, 1e-3) < 2e-2);
}

TEST_CASE("loss log round trip") {
  const auto path = std::filesystem::path(VSTAIN_TEST_DIR) / "losses_roundtrip.jsonl";
  {
    LossLog log(path);
    const auto b0 = total_generator_loss(all_ones(), LossWeights{}, 0, 5);
    log.write(0, b0, {{"lr", 0.0}});
    LossTerms t = all_ones();
    t.l1 = Var(Tensor::scalar(0.125f));
    log.write(10, total_generator_loss(t, LossWeights{}, 10, 5), {{"d_loss", 1.5}});
  }
  const auto recs = read_loss_log(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].step == 0);
  CHECK(recs[1].step == 10);
  auto value = [](const LossRecord& r, const std::string& k) {
    for (const auto& [name, v] : r.values)
      if (name == k) return v;
    return std::nan("");
  };
  CHECK(value(recs[0], "total") == doctest::Approx(2.7));
  CHECK(value(recs[0], "lr") == 0.0);
  CHECK(value(recs[1], "l1") == 0.125);
  CHECK(value(recs[1], "total") == doctest::Approx(12.825));
  CHECK(value(recs[1], "d_loss") == 1.5);
  {
    LossLog more(path, true);
    more.write(20, total_generator_loss(all_ones(), LossWeights{}, 20, 5));
  }
  CHECK(read_loss_log(path).size() == 3);
}
