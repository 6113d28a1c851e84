// SPDX-License-Identifier: Apache-2.0
#include "vstain/ops.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace vstain {
namespace {

constexpr int64_t kParallelElems = 1 << 15;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const float* s = a.data();
  float* d = out.data();
  const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > kParallelElems)
  for (int64_t i = 0; i < n; ++i) d[i] = f(s[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const float* x = a.data();
  const float* y = b.data();
  float* d = out.data();
  const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > kParallelElems)
  for (int64_t i = 0; i < n; ++i) d[i] = f(x[i], y[i]);
  return out;
}

Var constant(Tensor t) { return Var(std::move(t), false); }

int64_t spatial_size(const Shape& s) {
  int64_t n = 1;
  for (size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

void require_4d(const Var& x, const char* op) { require_rank(x.value(), 4, op); }

struct Taps {
  std::vector<int64_t> index;  // [out * width]
  std::vector<float> weight;   // [out * width]
  int width = 0;
};

Taps bilinear_taps(int64_t in, int64_t out) {
  Taps t;
  t.width = 2;
  t.index.resize(static_cast<size_t>(out * 2));
  t.weight.resize(static_cast<size_t>(out * 2));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    t.index[static_cast<size_t>(o * 2)] = i0;
    t.index[static_cast<size_t>(o * 2 + 1)] = i1;
    t.weight[static_cast<size_t>(o * 2)] = static_cast<float>(1.0 - l);
    t.weight[static_cast<size_t>(o * 2 + 1)] = static_cast<float>(l);
  }
  return t;
}

double cubic_weight(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

Taps bicubic_taps(int64_t in, int64_t out) {
  Taps t;
  t.width = 4;
  t.index.resize(static_cast<size_t>(out * 4));
  t.weight.resize(static_cast<size_t>(out * 4));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const auto i = static_cast<int64_t>(std::floor(src));
    const double f = src - static_cast<double>(i);
    for (int k = 0; k < 4; ++k) {
      const int64_t idx = std::clamp<int64_t>(i - 1 + k, 0, in - 1);
      t.index[static_cast<size_t>(o * 4 + k)] = idx;
      t.weight[static_cast<size_t>(o * 4 + k)] = static_cast<float>(cubic_weight(f - (k - 1)));
    }
  }
  return t;
}

// Separable resampling: rows along H with `th`, columns along W with `tw`.
Tensor apply_taps(const Tensor& x, const Taps& th, const Taps& tw, int64_t oh, int64_t ow) {
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
  const float* xp = x.data();
  float* op = out.data();
#pragma omp parallel for schedule(static) if (nc * oh * ow > kParallelElems)
  for (int64_t s = 0; s < nc; ++s) {
    std::vector<float> tmp(static_cast<size_t>(h * ow));
    const float* src = xp + s * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t o = 0; o < ow; ++o) {
        float acc = 0.0f;
        for (int k = 0; k < tw.width; ++k)
          acc += tw.weight[static_cast<size_t>(o * tw.width + k)] * src[y * w + tw.index[static_cast<size_t>(o * tw.width + k)]];
        tmp[static_cast<size_t>(y * ow + o)] = acc;
      }
    float* dst = op + s * oh * ow;
    for (int64_t o = 0; o < oh; ++o)
      for (int64_t xx = 0; xx < ow; ++xx) {
        float acc = 0.0f;
        for (int k = 0; k < th.width; ++k)
          acc += th.weight[static_cast<size_t>(o * th.width + k)] *
                 tmp[static_cast<size_t>(th.index[static_cast<size_t>(o * th.width + k)] * ow + xx)];
        dst[o * ow + xx] = acc;
      }
  }
  return out;
}

Tensor apply_taps_adjoint(const Tensor& g, const Taps& th, const Taps& tw, const Shape& in_shape) {
  const int64_t nc = in_shape[0] * in_shape[1], h = in_shape[2], w = in_shape[3];
  const int64_t oh = g.dim(2), ow = g.dim(3);
  Tensor out(in_shape, 0.0f);
  const float* gp = g.data();
  float* op = out.data();
#pragma omp parallel for schedule(static) if (nc * oh * ow > kParallelElems)
  for (int64_t s = 0; s < nc; ++s) {
    std::vector<float> tmp(static_cast<size_t>(h * ow), 0.0f);
    const float* src = gp + s * oh * ow;
    for (int64_t o = 0; o < oh; ++o)
      for (int k = 0; k < th.width; ++k) {
        const float wt = th.weight[static_cast<size_t>(o * th.width + k)];
        const int64_t row = th.index[static_cast<size_t>(o * th.width + k)];
        for (int64_t xx = 0; xx < ow; ++xx) tmp[static_cast<size_t>(row * ow + xx)] += wt * src[o * ow + xx];
      }
    float* dst = op + s * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t o = 0; o < ow; ++o)
        for (int k = 0; k < tw.width; ++k)
          dst[y * w + tw.index[static_cast<size_t>(o * tw.width + k)]] +=
              tw.weight[static_cast<size_t>(o * tw.width + k)] * tmp[static_cast<size_t>(y * ow + o)];
  }
  return out;
}

// [B,M,N] -> [B,N,M]
Tensor batch_transpose(const Tensor& a) {
  const int64_t b = a.dim(0), m = a.dim(1), n = a.dim(2);
  Tensor out(Shape{b, n, m});
  for (int64_t s = 0; s < b; ++s)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) out[(s * n + j) * m + i] = a[(s * m + i) * n + j];
  return out;
}

Tensor bmm_plain(const Tensor& a, const Tensor& b) {
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k)
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out(Shape{bs, m, n});
  for (int64_t s = 0; s < bs; ++s) kernels::gemm(m, n, k, a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n, false);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return record(zip(a.value(), b.value(), [](float x, float y) { return x + y; }), {a, b}, "add", true,
                [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return record(zip(a.value(), b.value(), [](float x, float y) { return x - y; }), {a, b}, "sub", true,
                [](const Var& g) { return std::vector<Var>{g, scale(g, -1.0f)}; });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return record(zip(a.value(), b.value(), [](float x, float y) { return x * y; }), {a, b}, "mul", true,
                [a, b](const Var& g) {
                  return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var(),
                                          b.requires_grad() ? mul(g, a) : Var()};
                });
}

Var scale(const Var& a, float s) {
  return record(map(a.value(), [s](float x) { return x * s; }), {a}, "scale", true,
                [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, float s) {
  return record(map(a.value(), [s](float x) { return x + s; }), {a}, "add_scalar", true,
                [](const Var& g) { return std::vector<Var>{g}; });
}

Var mul_const(const Var& a, const Tensor& m) {
  if (a.shape() != m.shape()) throw std::invalid_argument("mul_const: shape mismatch");
  return record(zip(a.value(), m, [](float x, float y) { return x * y; }), {a}, "mul_const", true,
                [m](const Var& g) { return std::vector<Var>{mul_const(g, m)}; });
}

Var square(const Var& a) {
  return record(map(a.value(), [](float x) { return x * x; }), {a}, "square", true,
                [a](const Var& g) { return std::vector<Var>{scale(mul(g, a), 2.0f)}; });
}

Var abs(const Var& a) {
  Tensor sign = map(a.value(), [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
  return record(map(a.value(), [](float x) { return std::fabs(x); }), {a}, "abs", true,
                [sign = std::move(sign)](const Var& g) { return std::vector<Var>{mul_const(g, sign)}; });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0f); }

Var leaky_relu(const Var& a, float slope) {
  Tensor mask = map(a.value(), [slope](float x) { return x > 0.0f ? 1.0f : slope; });
  Tensor out = zip(a.value(), mask, [](float x, float m) { return x * m; });
  return record(std::move(out), {a}, "leaky_relu", true,
                [mask = std::move(mask)](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var tanh(const Var& a) {
  Tensor y = map(a.value(), [](float x) { return std::tanh(x); });
  Tensor saved = y;
  return record(std::move(y), {a}, "tanh", false, [saved = std::move(saved)](const Var& g) {
    return std::vector<Var>{constant(zip(g.value(), saved, [](float gv, float yv) { return gv * (1.0f - yv * yv); }))};
  });
}

Var clamp_min(const Var& a, float lo) {
  Tensor mask = map(a.value(), [lo](float x) { return x >= lo ? 1.0f : 0.0f; });
  return record(map(a.value(), [lo](float x) { return std::max(x, lo); }), {a}, "clamp_min", true,
                [mask = std::move(mask)](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var log10(const Var& a) {
  return record(map(a.value(), [](float x) { return std::log10(x); }), {a}, "log10", false, [a](const Var& g) {
    const float inv_ln10 = static_cast<float>(1.0 / std::log(10.0));
    return std::vector<Var>{constant(zip(g.value(), a.value(), [inv_ln10](float gv, float x) { return gv * inv_ln10 / x; }))};
  });
}

// ----------------------------------------------------------------- reductions

Var sum(const Var& a) {
  double acc = 0.0;
  for (float v : a.value().values()) acc += v;
  Shape shape = a.shape();
  return record(Tensor::scalar(static_cast<float>(acc)), {a}, "sum", true,
                [shape](const Var& g) { return std::vector<Var>{expand_scalar(g, shape)}; });
}

Var mean(const Var& a) {
  double acc = 0.0;
  for (float v : a.value().values()) acc += v;
  const auto n = static_cast<float>(a.numel());
  Shape shape = a.shape();
  return record(Tensor::scalar(static_cast<float>(acc / static_cast<double>(a.numel()))), {a}, "mean", true,
                [shape, n](const Var& g) { return std::vector<Var>{expand_scalar(scale(g, 1.0f / n), shape)}; });
}

Var expand_scalar(const Var& s, const Shape& shape) {
  if (s.numel() != 1) throw std::invalid_argument("expand_scalar expects a scalar");
  return record(Tensor(shape, s.item()), {s}, "expand_scalar", true,
                [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var topk_mean_per_sample(const Var& x, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("top fraction must be in (0, 1]");
  if (x.value().rank() == 0 || x.numel() == 0) throw std::invalid_argument("topk_mean_per_sample on empty input");
  const int64_t n = x.dim(0);
  const int64_t m = x.numel() / n;
  if (m == 0) throw std::invalid_argument("topk_mean_per_sample on empty samples");
  auto k = static_cast<int64_t>(std::ceil(fraction * static_cast<double>(m) - 1e-9));
  k = std::clamp<int64_t>(k, 1, m);
  Tensor out(Shape{n});
  std::vector<std::vector<int64_t>> picked(static_cast<size_t>(n));
  const float* xp = x.value().data();
  for (int64_t s = 0; s < n; ++s) {
    std::vector<int64_t> idx(static_cast<size_t>(m));
    std::iota(idx.begin(), idx.end(), 0);
    const float* v = xp + s * m;
    auto by_value = [v](int64_t a, int64_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), by_value);
    idx.resize(static_cast<size_t>(k));
    double acc = 0.0;
    for (auto i : idx) acc += v[i];
    out[s] = static_cast<float>(acc / static_cast<double>(k));
    picked[static_cast<size_t>(s)] = std::move(idx);
  }
  Shape shape = x.shape();
  return record(std::move(out), {x}, "topk_mean", false, [shape, picked, m, k](const Var& g) {
    Tensor gx(shape, 0.0f);
    for (size_t s = 0; s < picked.size(); ++s) {
      const float gv = g.value()[static_cast<int64_t>(s)] / static_cast<float>(k);
      for (auto i : picked[s]) gx[static_cast<int64_t>(s) * m + i] += gv;
    }
    return std::vector<Var>{constant(std::move(gx))};
  });
}

// ------------------------------------------------------ channel broadcasting

Var add_channel_bias(const Var& x, const Var& bias) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = spatial_size(x.shape());
  if (bias.value().rank() != 1 || bias.dim(0) != c) throw std::invalid_argument("add_channel_bias: bias must be [C]");
  Tensor out = x.value();
  float* op = out.data();
  const float* bp = bias.value().data();
#pragma omp parallel for collapse(2) schedule(static) if (out.numel() > kParallelElems)
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) {
      float* row = op + (s * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] += bp[ch];
    }
  return record(std::move(out), {x, bias}, "add_channel_bias", true,
                [](const Var& g) { return std::vector<Var>{g, sum_to_channel(g)}; });
}

Var sum_to_channel(const Var& x) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = spatial_size(x.shape());
  Tensor out(Shape{c}, 0.0f);
  const float* xp = x.value().data();
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int64_t s = 0; s < n; ++s)
      for (int64_t i = 0; i < hw; ++i) acc += xp[(s * c + ch) * hw + i];
    out[ch] = static_cast<float>(acc);
  }
  Shape shape = x.shape();
  return record(std::move(out), {x}, "sum_to_channel", true,
                [shape](const Var& g) { return std::vector<Var>{broadcast_channel(g, shape)}; });
}

Var broadcast_channel(const Var& cv, const Shape& shape) {
  const int64_t n = shape[0], c = shape[1], hw = spatial_size(shape);
  if (cv.value().rank() != 1 || cv.dim(0) != c) throw std::invalid_argument("broadcast_channel: expects [C]");
  Tensor out(shape);
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) std::fill_n(out.data() + (s * c + ch) * hw, hw, cv.value()[ch]);
  return record(std::move(out), {cv}, "broadcast_channel", true,
                [](const Var& g) { return std::vector<Var>{sum_to_channel(g)}; });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = spatial_size(x.shape());
  if (gamma.shape() != Shape{n, c} || beta.shape() != Shape{n, c})
    throw std::invalid_argument("film: gamma/beta must be [N,C] matching " + shape_str(x.shape()));
  Tensor out(x.shape());
  const float* xp = x.value().data();
  const float* gp = gamma.value().data();
  const float* bp = beta.value().data();
  float* op = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (out.numel() > kParallelElems)
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) {
      const float gv = gp[s * c + ch], bv = bp[s * c + ch];
      const float* src = xp + (s * c + ch) * hw;
      float* dst = op + (s * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * gv + bv;
    }
  return record(std::move(out), {x, gamma, beta}, "film", false, [x, gamma, n, c, hw](const Var& g) {
    Tensor gx(x.shape()), gg(Shape{n, c}), gb(Shape{n, c});
    const float* gp2 = g.value().data();
    const float* xv = x.value().data();
    for (int64_t s = 0; s < n; ++s)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (s * c + ch) * hw;
        const float gam = gamma.value()[s * c + ch];
        double sg = 0.0, sgx = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
          gx[base + i] = gp2[base + i] * gam;
          sg += gp2[base + i];
          sgx += static_cast<double>(gp2[base + i]) * xv[base + i];
        }
        gg[s * c + ch] = static_cast<float>(sgx);
        gb[s * c + ch] = static_cast<float>(sg);
      }
    return std::vector<Var>{constant(std::move(gx)), constant(std::move(gg)), constant(std::move(gb))};
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels of nothing");
  const Shape& s0 = parts.front().shape();
  if (s0.size() < 2) throw std::invalid_argument("concat_channels expects [N,C,...]");
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && s[0] == s0[0];
    for (size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == s0[i];
    if (!ok) throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    widths.push_back(s[1]);
    total += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total;
  const int64_t n = s0[0], hw = spatial_size(s0);
  Tensor out(out_shape);
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const float* src = parts[p].value().data();
    for (int64_t s = 0; s < n; ++s)
      std::copy_n(src + s * widths[p] * hw, widths[p] * hw, out.data() + (s * total + offset) * hw);
    offset += widths[p];
  }
  return record(std::move(out), parts, "concat_channels", false, [widths, parts](const Var& g) {
    std::vector<Var> grads;
    int64_t off = 0;
    for (size_t p = 0; p < widths.size(); ++p) {
      grads.push_back(parts[p].requires_grad() ? slice_channels(g, off, off + widths[p]) : Var());
      off += widths[p];
    }
    return grads;
  });
}

Var slice_channels(const Var& x, int64_t begin, int64_t end) {
  const Shape& s = x.shape();
  if (begin < 0 || end > s[1] || begin >= end) throw std::invalid_argument("slice_channels: bad range");
  const int64_t n = s[0], c = s[1], hw = spatial_size(s), w = end - begin;
  Shape out_shape = s;
  out_shape[1] = w;
  Tensor out(out_shape);
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(x.value().data() + (i * c + begin) * hw, w * hw, out.data() + i * w * hw);
  return record(std::move(out), {x}, "slice_channels", false, [s, begin, w, n, c, hw](const Var& g) {
    Tensor gx(s, 0.0f);
    for (int64_t i = 0; i < n; ++i) std::copy_n(g.value().data() + i * w * hw, w * hw, gx.data() + (i * c + begin) * hw);
    return std::vector<Var>{constant(std::move(gx))};
  });
}

// ---------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvGeom& g) {
  require_4d(x, "conv2d input");
  Tensor y = kernels::conv2d_forward(x.value(), w.value(), g);
  Var out = record(std::move(y), {x, w}, "conv2d", true, [x, w, g](const Var& gy) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, w, x.shape(), g) : Var(),
                            w.requires_grad() ? conv2d_weight_grad(x, gy, w.shape(), g) : Var()};
  });
  return bias.defined() ? add_channel_bias(out, bias) : out;
}

Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, const ConvGeom& g) {
  Tensor gx = kernels::conv2d_input_grad(gy.value(), w.value(), x_shape, g);
  return record(std::move(gx), {gy, w}, "conv2d_input_grad", true, [gy, w, g](const Var& gz) {
    return std::vector<Var>{gy.requires_grad() ? conv2d(gz, w, Var(), g) : Var(),
                            w.requires_grad() ? conv2d_weight_grad(gz, gy, w.shape(), g) : Var()};
  });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, const ConvGeom& g) {
  Tensor gw = kernels::conv2d_weight_grad(x.value(), gy.value(), w_shape, g);
  return record(std::move(gw), {x, gy}, "conv2d_weight_grad", true, [x, gy, g](const Var& gz) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, gz, x.shape(), g) : Var(),
                            gy.requires_grad() ? conv2d(x, gz, Var(), g) : Var()};
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, const ConvGeom& g) {
  require_4d(x, "conv_transpose2d input");
  if (w.value().rank() != 4 || w.dim(0) != x.dim(1))
    throw std::invalid_argument("conv_transpose2d: weight " + shape_str(w.shape()) + " does not match input " +
                                shape_str(x.shape()));
  const int64_t oh = (x.dim(2) - 1) * g.stride - 2 * g.pad + w.dim(2);
  const int64_t ow = (x.dim(3) - 1) * g.stride - 2 * g.pad + w.dim(3);
  Var out = conv2d_input_grad(x, w, Shape{x.dim(0), w.dim(1), oh, ow}, g);
  return bias.defined() ? add_channel_bias(out, bias) : out;
}

// ----------------------------------------------------------------- resampling

Tensor avg_pool2d(const Tensor& x, int k) {
  require_rank(x, 4, "avg_pool2d");
  const int64_t h = x.dim(2), w = x.dim(3);
  if (k < 1 || h % k != 0 || w % k != 0)
    throw std::invalid_argument("avg_pool2d: size " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
  const int64_t nc = x.dim(0) * x.dim(1), oh = h / k, ow = w / k;
  Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
  const float inv = 1.0f / static_cast<float>(k * k);
  const float* xp = x.data();
  float* op = out.data();
#pragma omp parallel for schedule(static) if (x.numel() > kParallelElems)
  for (int64_t s = 0; s < nc; ++s)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) {
        float acc = 0.0f;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) acc += xp[(s * h + y * k + dy) * w + xx * k + dx];
        op[(s * oh + y) * ow + xx] = acc * inv;
      }
  return out;
}

Var avg_pool2d(const Var& x, int k) {
  if (k == 1) return x;
  return record(avg_pool2d(x.value(), k), {x}, "avg_pool2d", true, [k](const Var& g) {
    return std::vector<Var>{upsample_nearest2d(g, k, 1.0f / static_cast<float>(k * k))};
  });
}

Var upsample_nearest2d(const Var& x, int k, float gain) {
  require_4d(x, "upsample_nearest2d");
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h * k, ow = w * k;
  Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
  const float* xp = x.value().data();
  float* op = out.data();
#pragma omp parallel for schedule(static) if (out.numel() > kParallelElems)
  for (int64_t s = 0; s < nc; ++s)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) op[(s * oh + y) * ow + xx] = gain * xp[(s * h + y / k) * w + xx / k];
  return record(std::move(out), {x}, "upsample_nearest2d", true, [k, gain](const Var& g) {
    return std::vector<Var>{scale(avg_pool2d(g, k), gain * static_cast<float>(k * k))};
  });
}

Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "resize_bilinear");
  if (x.dim(2) == out_h && x.dim(3) == out_w) return x;
  return apply_taps(x, bilinear_taps(x.dim(2), out_h), bilinear_taps(x.dim(3), out_w), out_h, out_w);
}

Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  require_4d(x, "resize_bilinear");
  if (x.dim(2) == out_h && x.dim(3) == out_w) return x;
  Taps th = bilinear_taps(x.dim(2), out_h), tw = bilinear_taps(x.dim(3), out_w);
  Tensor out = apply_taps(x.value(), th, tw, out_h, out_w);
  Shape in_shape = x.shape();
  return record(std::move(out), {x}, "resize_bilinear", false, [th, tw, in_shape](const Var& g) {
    return std::vector<Var>{constant(apply_taps_adjoint(g.value(), th, tw, in_shape))};
  });
}

Tensor resize_bicubic(const Tensor& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "resize_bicubic");
  if (x.dim(2) == out_h && x.dim(3) == out_w) return x;
  return apply_taps(x, bicubic_taps(x.dim(2), out_h), bicubic_taps(x.dim(3), out_w), out_h, out_w);
}

Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "adaptive_avg_pool2d");
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (int64_t s = 0; s < nc; ++s)
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const int64_t y0 = (oy * h) / out_h, y1 = ((oy + 1) * h + out_h - 1) / out_h;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const int64_t x0 = (ox * w) / out_w, x1 = ((ox + 1) * w + out_w - 1) / out_w;
        double acc = 0.0;
        for (int64_t y = y0; y < y1; ++y)
          for (int64_t xx = x0; xx < x1; ++xx) acc += x[(s * h + y) * w + xx];
        out[(s * out_h + oy) * out_w + ox] = static_cast<float>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  return out;
}

Var pad_replicate(const Var& x, int p) {
  require_4d(x, "pad_replicate");
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h + 2 * p, ow = w + 2 * p;
  Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
  const float* xp = x.value().data();
  for (int64_t s = 0; s < nc; ++s)
    for (int64_t y = 0; y < oh; ++y) {
      const int64_t sy = std::clamp<int64_t>(y - p, 0, h - 1);
      for (int64_t xx = 0; xx < ow; ++xx) out[(s * oh + y) * ow + xx] = xp[(s * h + sy) * w + std::clamp<int64_t>(xx - p, 0, w - 1)];
    }
  Shape in_shape = x.shape();
  return record(std::move(out), {x}, "pad_replicate", false, [in_shape, p, nc, h, w, oh, ow](const Var& g) {
    Tensor gx(in_shape, 0.0f);
    const float* gp = g.value().data();
    for (int64_t s = 0; s < nc; ++s)
      for (int64_t y = 0; y < oh; ++y) {
        const int64_t sy = std::clamp<int64_t>(y - p, 0, h - 1);
        for (int64_t xx = 0; xx < ow; ++xx) gx[(s * h + sy) * w + std::clamp<int64_t>(xx - p, 0, w - 1)] += gp[(s * oh + y) * ow + xx];
      }
    return std::vector<Var>{constant(std::move(gx))};
  });
}

// -------------------------------------------------------------- normalization

Var group_norm(const Var& x, int64_t groups, float eps) {
  require_4d(x, "group_norm");
  auto stats = std::make_shared<kernels::NormStats>();
  Tensor y = kernels::group_norm_forward(x.value(), groups, eps, stats.get());
  Tensor saved = y;
  return record(std::move(y), {x}, "group_norm", false, [saved = std::move(saved), stats, groups](const Var& g) {
    return std::vector<Var>{constant(kernels::group_norm_backward(g.value(), saved, *stats, groups))};
  });
}

Var instance_norm(const Var& x, float eps) { return group_norm(x, x.dim(1), eps); }

Var channel_normalize(const Var& x, float eps) {
  require_4d(x, "channel_normalize");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  std::vector<float> norms(static_cast<size_t>(n * hw));
  const float* xp = x.value().data();
  for (int64_t s = 0; s < n; ++s)
    for (int64_t i = 0; i < hw; ++i) {
      double acc = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double v = xp[(s * c + ch) * hw + i];
        acc += v * v;
      }
      const auto nv = static_cast<float>(std::sqrt(acc + eps));
      norms[static_cast<size_t>(s * hw + i)] = nv;
      for (int64_t ch = 0; ch < c; ++ch) y[(s * c + ch) * hw + i] = xp[(s * c + ch) * hw + i] / nv;
    }
  Tensor saved = y;
  return record(std::move(y), {x}, "channel_normalize", false,
                [saved = std::move(saved), norms = std::move(norms), n, c, hw](const Var& g) {
                  Tensor gx(saved.shape());
                  const float* gp = g.value().data();
                  for (int64_t s = 0; s < n; ++s)
                    for (int64_t i = 0; i < hw; ++i) {
                      double dot = 0.0;
                      for (int64_t ch = 0; ch < c; ++ch)
                        dot += static_cast<double>(gp[(s * c + ch) * hw + i]) * saved[(s * c + ch) * hw + i];
                      const float nv = norms[static_cast<size_t>(s * hw + i)];
                      for (int64_t ch = 0; ch < c; ++ch) {
                        const int64_t j = (s * c + ch) * hw + i;
                        gx[j] = (gp[j] - saved[j] * static_cast<float>(dot)) / nv;
                      }
                    }
                  return std::vector<Var>{constant(std::move(gx))};
                });
}

// -------------------------------------------------------------- dense algebra

Var reshape(const Var& x, const Shape& shape) {
  Shape in_shape = x.shape();
  return record(x.value().reshaped(shape), {x}, "reshape", true,
                [in_shape](const Var& g) { return std::vector<Var>{reshape(g, in_shape)}; });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require_rank(x.value(), 2, "linear input");
  const int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.shape() != Shape{out, in}) throw std::invalid_argument("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  Tensor wt(Shape{in, out});
  for (int64_t o = 0; o < out; ++o)
    for (int64_t i = 0; i < in; ++i) wt[i * out + o] = w.value()[o * in + i];
  Tensor y(Shape{n, out});
  kernels::gemm(n, out, in, x.value().data(), wt.data(), y.data(), false);
  if (bias.defined())
    for (int64_t s = 0; s < n; ++s)
      for (int64_t o = 0; o < out; ++o) y[s * out + o] += bias.value()[o];
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return record(std::move(y), std::move(inputs), "linear", false, [x, w, n, in, out, has_bias = bias.defined()](const Var& g) {
    const Tensor& gv = g.value();
    Tensor gx(Shape{n, in});
    kernels::gemm(n, in, out, gv.data(), w.value().data(), gx.data(), false);
    Tensor gt(Shape{out, n});
    for (int64_t s = 0; s < n; ++s)
      for (int64_t o = 0; o < out; ++o) gt[o * n + s] = gv[s * out + o];
    Tensor gw(Shape{out, in});
    kernels::gemm(out, in, n, gt.data(), x.value().data(), gw.data(), false);
    std::vector<Var> grads{constant(std::move(gx)), constant(std::move(gw))};
    if (has_bias) {
      Tensor gb(Shape{out}, 0.0f);
      for (int64_t s = 0; s < n; ++s)
        for (int64_t o = 0; o < out; ++o) gb[o] += gv[s * out + o];
      grads.push_back(constant(std::move(gb)));
    }
    return grads;
  });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  require_rank(a.value(), 3, "bmm lhs");
  require_rank(b.value(), 3, "bmm rhs");
  Tensor ae = trans_a ? batch_transpose(a.value()) : a.value();
  Tensor be = trans_b ? batch_transpose(b.value()) : b.value();
  Tensor out = bmm_plain(ae, be);
  return record(std::move(out), {a, b}, "bmm", false,
                [ae = std::move(ae), be = std::move(be), trans_a, trans_b](const Var& g) {
                  // C = A'B'  =>  dA' = G B'^T, dB' = A'^T G
                  Tensor ga = bmm_plain(g.value(), batch_transpose(be));
                  Tensor gb = bmm_plain(batch_transpose(ae), g.value());
                  if (trans_a) ga = batch_transpose(ga);
                  if (trans_b) gb = batch_transpose(gb);
                  return std::vector<Var>{constant(std::move(ga)), constant(std::move(gb))};
                });
}

Var softmax_lastdim(const Var& x) {
  const int64_t last = x.shape().back();
  const int64_t rows = x.numel() / last;
  Tensor y(x.shape());
  const float* xp = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = xp + r * last;
    const float mx = *std::max_element(src, src + last);
    double acc = 0.0;
    for (int64_t i = 0; i < last; ++i) {
      const float e = std::exp(src[i] - mx);
      y[r * last + i] = e;
      acc += e;
    }
    const auto inv = static_cast<float>(1.0 / acc);
    for (int64_t i = 0; i < last; ++i) y[r * last + i] *= inv;
  }
  Tensor saved = y;
  return record(std::move(y), {x}, "softmax", false, [saved = std::move(saved), rows, last](const Var& g) {
    Tensor gx(saved.shape());
    const float* gp = g.value().data();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t i = 0; i < last; ++i) dot += static_cast<double>(gp[r * last + i]) * saved[r * last + i];
      for (int64_t i = 0; i < last; ++i)
        gx[r * last + i] = saved[r * last + i] * (gp[r * last + i] - static_cast<float>(dot));
    }
    return std::vector<Var>{constant(std::move(gx))};
  });
}

Var embedding(const Var& table, const std::vector<int>& indices) {
  require_rank(table.value(), 2, "embedding table");
  const int64_t rows = table.dim(0), width = table.dim(1);
  const auto n = static_cast<int64_t>(indices.size());
  Tensor out(Shape{n, width});
  for (int64_t s = 0; s < n; ++s) {
    const int idx = indices[static_cast<size_t>(s)];
    if (idx < 0 || idx >= rows)
      throw std::out_of_range("embedding index " + std::to_string(idx) + " outside table of " + std::to_string(rows) + " rows");
    std::copy_n(table.value().data() + idx * width, width, out.data() + s * width);
  }
  Shape tshape = table.shape();
  return record(std::move(out), {table}, "embedding", false, [tshape, indices, width](const Var& g) {
    Tensor gt(tshape, 0.0f);
    for (size_t s = 0; s < indices.size(); ++s)
      for (int64_t j = 0; j < width; ++j) gt[indices[s] * width + j] += g.value()[static_cast<int64_t>(s) * width + j];
    return std::vector<Var>{constant(std::move(gt))};
  });
}

}  // namespace vstain
