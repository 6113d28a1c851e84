// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vstain/stain.hpp"

using namespace vstain;

namespace {

Planes random_concentrations(int64_t h, int64_t w, uint64_t seed, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, hi);
  Planes p;
  p.h = h;
  p.w = w;
  for (auto& plane : p.c) {
    plane.resize(static_cast<size_t>(h * w));
    for (auto& v : plane) v = u(rng);
  }
  return p;
}

}  // namespace

TEST_CASE("stain matrix rows are unit and the inverse is exact") {
  const StainMatrix m = StainMatrix::h_dab();
  for (const auto& r : m.rows()) CHECK(std::hypot(r[0], r[1], r[2]) == doctest::Approx(1.0).epsilon(1e-12));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += m.rows()[i][k] * m.inverse()[k][j];
      CHECK(acc == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
    }
  // Residual row is orthogonal to both stains.
  const auto& r = m.rows();
  for (int s : {0, 2}) CHECK(std::abs(r[1][0] * r[s][0] + r[1][1] * r[s][1] + r[1][2] * r[s][2]) < 1e-12);
  CHECK_THROWS_AS(StainMatrix(Mat3{Vec3{1, 0, 0}, Vec3{2, 0, 0}, Vec3{0, 0, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(StainMatrix::from_two({0, 0, 0}, {0, 1, 0}), std::invalid_argument);
}

TEST_CASE("optical density matches the definition and clamps at eps") {
  Tensor img(Shape{3, 1, 3});
  const float px[9] = {1.0f, 0.1f, 0.0f, 0.5f, 0.01f, 0.001f, 0.25f, 1.0f, 0.2f};
  std::copy_n(px, 9, img.data());
  const double eps = 1.0 / 255.0;
  const Planes od = rgb_to_od(img, eps);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 3; ++i) {
      const double p = std::max(static_cast<double>(px[c * 3 + i]), eps);
      CHECK(od.c[c][i] == doctest::Approx(-std::log10(p)).epsilon(1e-12));
    }
  CHECK(od.c[0][2] == doctest::Approx(std::log10(255.0)));
  Tensor bad(Shape{3, 1, 1});
  bad[0] = std::nanf("");
  CHECK_THROWS_AS(rgb_to_od(bad, eps), std::domain_error);
  CHECK_THROWS_AS(rgb_to_od(Tensor(Shape{1, 2, 2}), eps), std::invalid_argument);
}

TEST_CASE("render then deconvolve recovers concentrations") {
  const StainMatrix m = StainMatrix::h_dab();
  const Planes conc = random_concentrations(25, 40, 7, 1.5);
  const Tensor rgb = render_concentrations(conc, m);
  const Planes back = deconvolve(rgb_to_od(rgb, 1e-12), m);
  double worst = 0.0;
  for (int s = 0; s < 3; ++s)
    for (size_t i = 0; i < conc.c[s].size(); ++i) worst = std::max(worst, std::abs(back.c[s][i] - conc.c[s][i]));
  // Float32 rendering bounds the recoverable precision.
  CHECK(worst < 1e-4);
}

TEST_CASE("deconvolution solves the linear system per pixel") {
  // Independent solve by Cramer's rule on od = c^T M.
  const StainMatrix m = StainMatrix::h_dab();
  const auto& r = m.rows();
  Planes od;
  od.h = 1;
  od.w = 1;
  od.c = {std::vector<double>{0.7}, std::vector<double>{0.9}, std::vector<double>{1.1}};
  const Planes conc = deconvolve(od, m);
  // Columns of M^T are the stain rows; solve M^T c = od.
  auto det = [](const Mat3& a) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  Mat3 mt{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) mt[i][j] = r[j][i];
  const Vec3 b{0.7, 0.9, 1.1};
  const double d = det(mt);
  for (int s = 0; s < 3; ++s) {
    Mat3 a = mt;
    for (int i = 0; i < 3; ++i) a[i][s] = b[i];
    CHECK(conc.c[s][0] == doctest::Approx(std::max(det(a) / d, 0.0)).epsilon(1e-10));
  }
}

TEST_CASE("top fraction count and intensity score") {
  CHECK(top_count(100, 0.10) == 10);
  CHECK(top_count(101, 0.10) == 11);
  CHECK(top_count(5, 0.01) == 1);
  CHECK(top_count(7, 1.0) == 7);
  CHECK_THROWS_AS(top_count(10, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(top_count(10, 1.5), std::invalid_argument);

  std::vector<double> v(20);
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), std::mt19937(3));
  // Top 10% of 0..19 is {19, 18}.
  CHECK(dab_intensity_score(v, 0.10) == doctest::Approx(18.5));
  CHECK(dab_intensity_score(v, 1.0) == doctest::Approx(9.5));
  CHECK(dab_intensity_score(v, 0.11) == doctest::Approx((19.0 + 18.0 + 17.0) / 3.0));
  CHECK_THROWS_AS(dab_intensity_score(std::vector<double>{}, 0.1), std::invalid_argument);
}

TEST_CASE("histogram bins, smoothing and edge clamping") {
  const std::vector<double> v{-1.0, 0.0, 0.4, 1.0, 2.9, 3.0, 5.0};
  const auto h = dab_histogram(v, 3, 0.0, 3.0, 0.5);
  // Raw counts: bin0 {-1, 0, 0.4}, bin1 {1.0}, bin2 {2.9, 3.0, 5.0}.
  const double total = 7.0 + 1.5;
  CHECK(h[0] == doctest::Approx(3.5 / total));
  CHECK(h[1] == doctest::Approx(1.5 / total));
  CHECK(h[2] == doctest::Approx(3.5 / total));
  const auto empty = dab_histogram(std::vector<double>{}, 4, 0.0, 1.0, 1e-8);
  for (double p : empty) CHECK(p == doctest::Approx(0.25));
  CHECK_THROWS_AS(dab_histogram(v, 0, 0.0, 1.0, 1e-8), std::invalid_argument);
  CHECK_THROWS_AS(dab_histogram(v, 4, 1.0, 1.0, 1e-8), std::invalid_argument);
  CHECK_THROWS_AS(dab_histogram(v, 4, 0.0, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("KL divergence oracle and direction") {
  const std::vector<double> p{0.5, 0.25, 0.25}, q{0.25, 0.5, 0.25};
  const double expected = 0.5 * std::log(2.0) + 0.25 * std::log(0.5);
  CHECK(kl_divergence(p, q) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK_THROWS_AS(kl_divergence(p, std::vector<double>{1.0}), std::invalid_argument);

  // Asymmetric case separates the two directions.
  StainConfig cfg;
  cfg.hist_bins = 4;
  cfg.hist_lo = 0.0;
  cfg.hist_hi = 4.0;
  cfg.hist_smoothing = 1.0;
  const std::vector<double> gen{0.5, 0.5, 0.5, 1.5}, real{0.5, 2.5, 3.5, 3.5};
  const auto pg = dab_histogram(gen, 4, 0.0, 4.0, 1.0), pr = dab_histogram(real, 4, 0.0, 4.0, 1.0);
  double rg = 0.0, gr = 0.0;
  for (int i = 0; i < 4; ++i) {
    rg += pr[i] * std::log(pr[i] / pg[i]);
    gr += pg[i] * std::log(pg[i] / pr[i]);
  }
  CHECK(dab_kl(gen, real, cfg) == doctest::Approx(rg).epsilon(1e-12));
  cfg.kl_direction = KlDirection::kGenReal;
  CHECK(dab_kl(gen, real, cfg) == doctest::Approx(gr).epsilon(1e-12));
  CHECK(rg != doctest::Approx(gr));
}

TEST_CASE("pearson correlation oracle and constant input") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(200), y(200);
  for (size_t i = 0; i < x.size(); ++i) {
    x[i] = n(rng);
    y[i] = 0.6 * x[i] + n(rng);
  }
  // Two-pass oracle in long double.
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const long double cnt = static_cast<long double>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  for (size_t i = 0; i < x.size(); ++i) {
    const long double dx = x[i] - sx / cnt, dy = y[i] - sy / cnt;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  CHECK(pearson_r(x, y) == doctest::Approx(static_cast<double>(sxy / std::sqrt(sxx * syy))).epsilon(1e-12));
  std::vector<double> neg(x.size());
  std::transform(x.begin(), x.end(), neg.begin(), [](double v) { return -3.0 * v + 2.0; });
  CHECK(pearson_r(x, neg) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(pearson_r(x, std::vector<double>(x.size(), 4.0)), ConstantInputError);
  CHECK_THROWS_AS(pearson_r(std::vector<double>{1.0}, std::vector<double>{2.0}), std::invalid_argument);
}

TEST_CASE("dab loss value matches the double precision score path") {
  const StainConfig cfg;
  const Tensor gen = testutil::random_tensor(Shape{2, 3, 12, 12}, 21, 0.05f, 0.95f);
  const Tensor tgt = testutil::random_tensor(Shape{2, 3, 12, 12}, 22, 0.05f, 0.6f);
  double expected = 0.0;
  for (int64_t s = 0; s < 2; ++s) {
    Tensor a(Shape{3, 12, 12}), b(Shape{3, 12, 12});
    std::copy_n(gen.data() + s * 432, 432, a.data());
    std::copy_n(tgt.data() + s * 432, 432, b.data());
    expected += std::abs(dab_intensity_score(dab_channel(a, cfg), cfg.top_fraction) -
                         dab_intensity_score(dab_channel(b, cfg), cfg.top_fraction));
  }
  expected /= 2.0;
  const Var loss = dab_loss(Var(gen), tgt, cfg);
  CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-4));
  CHECK_THROWS_AS(dab_loss(Var(gen), Tensor(Shape{1, 3, 12, 12}), cfg), std::invalid_argument);
}

TEST_CASE("dab loss gradient") {
  const StainConfig cfg;
  const Tensor gen = testutil::random_tensor(Shape{2, 3, 10, 10}, 31, 0.3f, 0.95f);
  // Dark target keeps the absolute value away from its kink.
  const Tensor tgt = testutil::random_tensor(Shape{2, 3, 10, 10}, 32, 0.02f, 0.1f);
  auto f = [&](const Var& x) { return dab_loss(x, tgt, cfg); };
  CHECK(testutil::directional_check(f, gen, 1e-3) < 2e-2);
}
