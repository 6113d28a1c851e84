// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "test_util.hpp"
#include "vstain/ops.hpp"

using namespace vstain;
using testutil::directional_check;
using testutil::probe;
using testutil::random_tensor;

namespace {

// Values bounded away from zero so kinks of abs/relu are not crossed by the step.
Tensor away_from_zero(Shape s, uint64_t seed) {
  Tensor t = random_tensor(std::move(s), seed, 0.2f, 1.0f);
  for (int64_t i = 0; i < t.numel(); i += 2) t[i] = -t[i];
  return t;
}

}  // namespace

TEST_CASE("backward accumulates and grad leaves .grad untouched") {
  Var x(Tensor(Shape{3}, std::vector<float>{1, 2, 3}), true);
  Var y = sum(mul(x, x));
  auto g = grad(y, {x});
  CHECK(g[0].value().values() == std::vector<float>{2, 4, 6});
  CHECK_FALSE(x.grad().defined());
  backward(y);
  backward(sum(mul(x, x)));
  CHECK(x.grad().values() == std::vector<float>{4, 8, 12});
}

TEST_CASE("no-grad mode records nothing") {
  Var x(Tensor::ones({2}), true);
  NoGradGuard guard;
  Var y = scale(x, 2.0f);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("elementwise ops pass directional gradient checks") {
  const Tensor x = away_from_zero({2, 3, 4, 4}, 1);
  const Tensor other = random_tensor({2, 3, 4, 4}, 2);
  CHECK(directional_check([&](const Var& v) { return probe(mul(v, Var(other))); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(square(v)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(abs(v)); }, x, 1e-3) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(leaky_relu(v, 0.2f)); }, x, 1e-3) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(tanh(v)); }, x) < 1e-2);
  const Tensor pos = random_tensor({2, 3, 4, 4}, 3, 0.2f, 1.0f);
  CHECK(directional_check([&](const Var& v) { return probe(log10(v)); }, pos, 1e-3) < 1e-2);
}

TEST_CASE("convolutions and their adjoints pass gradient checks") {
  const Tensor x = random_tensor({2, 3, 7, 7}, 4);
  const Tensor w = random_tensor({4, 3, 3, 3}, 5);
  const Tensor b = random_tensor({4}, 6);
  for (ConvGeom g : {ConvGeom{1, 1}, ConvGeom{2, 1}, ConvGeom{2, 0}}) {
    CHECK(directional_check([&](const Var& v) { return probe(conv2d(v, Var(w), Var(b), g)); }, x) < 1e-2);
    CHECK(directional_check([&](const Var& v) { return probe(conv2d(Var(x), v, Var(b), g)); }, w) < 1e-2);
  }
  const Tensor wt = random_tensor({3, 5, 2, 2}, 7);
  CHECK(directional_check([&](const Var& v) { return probe(conv_transpose2d(v, Var(wt), Var(), {2, 0})); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(conv_transpose2d(Var(x), v, Var(), {2, 0})); }, wt) < 1e-2);
}

TEST_CASE("second derivative through a convolution matches finite differences of the gradient") {
  // phi(w) = |d/dx sum(lrelu(conv(x, w)))|^2, the R1 structure.
  const Tensor x = random_tensor({1, 2, 6, 6}, 8);
  const Tensor w0 = random_tensor({3, 2, 3, 3}, 9);  // second layer, fixed
  auto phi = [&](const Var& w) {
    Var xv(x, true);
    Var y = sum(leaky_relu(conv2d(conv2d(xv, w, Var(), {1, 1}), Var(w0), Var(), {2, 1}), 0.2f));
    Var gx = grad(y, {xv}, true)[0];
    return sum(square(gx));
  };
  const Tensor w = random_tensor({2, 2, 3, 3}, 11);
  CHECK(directional_check(phi, w, 1e-2) < 1e-2);
}

TEST_CASE("resampling ops pass gradient checks") {
  const Tensor x = random_tensor({1, 2, 8, 8}, 12);
  CHECK(directional_check([&](const Var& v) { return probe(avg_pool2d(v, 2)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(upsample_nearest2d(v, 2)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(resize_bilinear(v, 5, 11)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(pad_replicate(v, 1)); }, x) < 1e-2);
}

TEST_CASE("normalizations pass gradient checks") {
  const Tensor x = random_tensor({2, 4, 5, 5}, 13);
  CHECK(directional_check([&](const Var& v) { return probe(group_norm(v, 2)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(instance_norm(v)); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(channel_normalize(v)); }, x) < 1e-2);
}

TEST_CASE("dense ops pass gradient checks") {
  const Tensor a = random_tensor({2, 3, 4}, 14), b = random_tensor({2, 5, 4}, 15);
  CHECK(directional_check([&](const Var& v) { return probe(bmm(v, Var(b), false, true)); }, a) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(softmax_lastdim(v)); }, a) < 1e-2);
  const Tensor x = random_tensor({3, 4}, 16), w = random_tensor({6, 4}, 17), bias = random_tensor({6}, 18);
  CHECK(directional_check([&](const Var& v) { return probe(linear(v, Var(w), Var(bias))); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(linear(Var(x), v, Var(bias))); }, w) < 1e-2);
  const Tensor table = random_tensor({5, 3}, 19);
  CHECK(directional_check([&](const Var& v) { return probe(embedding(v, {4, 0, 4})); }, table) < 1e-2);
}

TEST_CASE("film and channel ops pass gradient checks") {
  const Tensor x = random_tensor({2, 3, 4, 4}, 20), g = random_tensor({2, 3}, 21), b = random_tensor({2, 3}, 22);
  CHECK(directional_check([&](const Var& v) { return probe(film(v, Var(g), Var(b))); }, x) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(film(Var(x), v, Var(b))); }, g) < 1e-2);
  CHECK(directional_check([&](const Var& v) { return probe(concat_channels({v, slice_channels(v, 1, 3)})); }, x) < 1e-2);
}

TEST_CASE("bilinear resize matches a direct half-pixel-center oracle") {
  const Tensor x = random_tensor({1, 1, 4, 6}, 23);
  const Tensor y = resize_bilinear(x, 3, 5);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      const double sy = std::max(0.0, (i + 0.5) * 4.0 / 3.0 - 0.5), sx = std::max(0.0, (j + 0.5) * 6.0 / 5.0 - 0.5);
      const int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
      const int64_t y1 = std::min<int64_t>(y0 + 1, 3), x1 = std::min<int64_t>(x0 + 1, 5);
      const double fy = sy - y0, fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * x[y0 * 6 + x0] + fx * x[y0 * 6 + x1]) + fy * ((1 - fx) * x[y1 * 6 + x0] + fx * x[y1 * 6 + x1]);
      CHECK(y[i * 5 + j] == doctest::Approx(v).epsilon(1e-5));
    }
}

TEST_CASE("adaptive average pooling of an evenly divisible grid equals block means") {
  const Tensor x = random_tensor({1, 2, 8, 8}, 24);
  const Tensor y = adaptive_avg_pool2d(x, 2, 2);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t by = 0; by < 2; ++by)
      for (int64_t bx = 0; bx < 2; ++bx) {
        double s = 0;
        for (int64_t i = 0; i < 4; ++i)
          for (int64_t j = 0; j < 4; ++j) s += x.at(0, c, by * 4 + i, bx * 4 + j);
        CHECK(y.at(0, c, by, bx) == doctest::Approx(s / 16).epsilon(1e-5));
      }
}

TEST_CASE("topk mean picks the largest ceil(f*M) entries per sample") {
  Tensor x(Shape{2, 1, 1, 5}, std::vector<float>{1, 5, 3, 2, 4, -1, -2, -3, -4, -5});
  Var y = topk_mean_per_sample(Var(x), 0.3);  // ceil(1.5) = 2
  CHECK(y.value()[0] == doctest::Approx(4.5));
  CHECK(y.value()[1] == doctest::Approx(-1.5));
}

TEST_CASE("embedding rejects out-of-range indices") {
  CHECK_THROWS(embedding(Var(Tensor::zeros({3, 2})), {3}));
}
