// SPDX-License-Identifier: Apache-2.0
#include "vstain/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace vstain {

int64_t conv_out_size(int64_t in, int64_t kernel, const ConvGeom& g) {
  const int64_t span = in + 2 * g.pad - kernel;
  if (span < 0 || g.stride < 1) throw std::invalid_argument("convolution kernel larger than padded input");
  return span / g.stride + 1;
}

namespace kernels {
namespace {

constexpr int64_t kBlockK = 256;

// Scratch array without value-initialization.
class Buffer {
 public:
  explicit Buffer(int64_t n) : data_(new float[static_cast<size_t>(n)]) {}
  float* data() { return data_.get(); }
  const float* data() const { return data_.get(); }

 private:
  std::unique_ptr<float[]> data_;
};
constexpr int64_t kParallelFlops = 1 << 15;

struct ConvDims {
  int64_t n, ci, h, w, co, kh, kw, ho, wo;
  int64_t k() const { return ci * kh * kw; }
  int64_t p() const { return ho * wo; }
};

ConvDims conv_dims(const Shape& x, const Shape& w, const ConvGeom& g) {
  if (x.size() != 4 || w.size() != 4) throw std::invalid_argument("conv2d expects 4-D input and weight");
  if (x[1] != w[1])
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x) + " weight " + shape_str(w));
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0};
  d.ho = conv_out_size(d.h, d.kh, g);
  d.wo = conv_out_size(d.w, d.kw, g);
  return d;
}

// Valid output range [lo, hi) for kernel offset `k` along one axis.
void valid_range(int64_t in, int64_t out, int64_t k, const ConvGeom& g, int64_t& lo, int64_t& hi) {
  const int64_t shift = k - g.pad;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  hi = in - shift <= 0 ? 0 : (in - shift - 1) / g.stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
}

// col[(c*kh+ky)*kw+kx][n*P + oy*wo + ox]
Buffer im2col(const Tensor& x, const ConvDims& d, const ConvGeom& g) {
  const int64_t np = d.n * d.p();
  Buffer col(d.k() * np);
  const float* xp = x.data();
#pragma omp parallel for schedule(static) if (d.k() * np > kParallelFlops)
  for (int64_t row = 0; row < d.k(); ++row) {
    const int64_t c = row / (d.kh * d.kw);
    const int64_t ky = (row / d.kw) % d.kh;
    const int64_t kx = row % d.kw;
    int64_t ylo, yhi, xlo, xhi;
    valid_range(d.h, d.ho, ky, g, ylo, yhi);
    valid_range(d.w, d.wo, kx, g, xlo, xhi);
    float* dst = col.data() + row * np;
    for (int64_t n = 0; n < d.n; ++n) {
      const float* src = xp + (n * d.ci + c) * d.h * d.w;
      float* plane = dst + n * d.p();
      std::fill(plane, plane + ylo * d.wo, 0.0f);
      for (int64_t oy = ylo; oy < yhi; ++oy) {
        const int64_t base = (oy * g.stride - g.pad + ky) * d.w + kx - g.pad;
        float* out = plane + oy * d.wo;
        std::fill(out, out + xlo, 0.0f);
        for (int64_t ox = xlo; ox < xhi; ++ox) out[ox] = src[base + ox * g.stride];
        std::fill(out + xhi, out + d.wo, 0.0f);
      }
      std::fill(plane + yhi * d.wo, plane + d.p(), 0.0f);
    }
  }
  return col;
}

// [N, C, P] -> [C, N*P]
Buffer batch_to_channel_major(const Tensor& t, int64_t n, int64_t c, int64_t p) {
  Buffer out(n * c * p);
  const float* src = t.data();
#pragma omp parallel for schedule(static) if (n * c * p > kParallelFlops)
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t s = 0; s < n; ++s) std::copy_n(src + (s * c + ch) * p, p, out.data() + ch * n * p + s * p);
  return out;
}

using vf = float __attribute__((vector_size(64)));
constexpr int64_t kLanes = 16;

inline vf load(const float* p) {
  vf v;
  std::memcpy(&v, p, sizeof(vf));
  return v;
}
inline void store(float* p, const vf& v) { std::memcpy(p, &v, sizeof(vf)); }

// C[i0:i0+4, j0:j0+64] over k in [k0, k1), accumulators held in registers.
inline void micro_4x64(int64_t n, int64_t k, int64_t i0, int64_t j0, int64_t k0, int64_t k1, const float* a,
                       const float* b, float* c) {
  vf acc[4][4];
  for (int r = 0; r < 4; ++r)
    for (int v = 0; v < 4; ++v) acc[r][v] = load(c + (i0 + r) * n + j0 + v * kLanes);
  const float* a0 = a + i0 * k;
  for (int64_t kk = k0; kk < k1; ++kk) {
    const float* br = b + kk * n + j0;
    const vf b0 = load(br), b1 = load(br + 16), b2 = load(br + 32), b3 = load(br + 48);
    for (int r = 0; r < 4; ++r) {
      const float av = a0[r * k + kk];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
      acc[r][2] += av * b2;
      acc[r][3] += av * b3;
    }
  }
  for (int r = 0; r < 4; ++r)
    for (int v = 0; v < 4; ++v) store(c + (i0 + r) * n + j0 + v * kLanes, acc[r][v]);
}

// Scalar edge path with the same per-element summation order.
inline void edge_block(int64_t n, int64_t k, int64_t i0, int64_t i1, int64_t j0, int64_t j1, int64_t k0, int64_t k1,
                       const float* a, const float* b, float* c) {
  for (int64_t i = i0; i < i1; ++i) {
    float* ci = c + i * n;
    for (int64_t kk = k0; kk < k1; ++kk) {
      const float av = a[i * k + kk];
      const float* br = b + kk * n;
#pragma omp simd
      for (int64_t j = j0; j < j1; ++j) ci[j] += av * br[j];
    }
  }
}

}  // namespace

void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  if (m == 0 || n == 0 || k == 0) return;
  constexpr int64_t kTileM = 4, kTileN = 64;
  const int64_t mt = (m + kTileM - 1) / kTileM;
  const int64_t nt = (n + kTileN - 1) / kTileN;
#pragma omp parallel for collapse(2) schedule(static) if (m * n * k > kParallelFlops)
  for (int64_t it = 0; it < mt; ++it)
    for (int64_t jt = 0; jt < nt; ++jt) {
      const int64_t i0 = it * kTileM, i1 = std::min(m, i0 + kTileM);
      const int64_t j0 = jt * kTileN, j1 = std::min(n, j0 + kTileN);
      for (int64_t k0 = 0; k0 < k; k0 += kBlockK) {
        const int64_t k1 = std::min(k, k0 + kBlockK);
        if (i1 - i0 == kTileM && j1 - j0 == kTileN)
          micro_4x64(n, k, i0, j0, k0, k1, a, b, c);
        else
          edge_block(n, k, i0, i1, j0, j1, k0, k1, a, b, c);
      }
    }
}

void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
  // c[i,j] = sum_kk a[i,kk] * b[j,kk]; lane-parallel partial sums reduced in a
  // fixed order, so results do not depend on the thread count.
#pragma omp parallel for collapse(2) schedule(static) if (m * n * k > kParallelFlops)
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const float* ai = a + i * k;
      const float* bj = b + j * k;
      vf acc = {};
      int64_t kk = 0;
      for (; kk + kLanes <= k; kk += kLanes) acc += load(ai + kk) * load(bj + kk);
      float tail = 0.0f;
      for (; kk < k; ++kk) tail += ai[kk] * bj[kk];
      float total = 0.0f;
      for (int l = 0; l < kLanes; ++l) total += acc[l];
      c[i * n + j] = total + tail;
    }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeom& g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g);
  const int64_t np = d.n * d.p();
  const Buffer col = im2col(x, d, g);
  Buffer out_cm(d.co * np);
  gemm(d.co, np, d.k(), w.data(), col.data(), out_cm.data(), false);
  Tensor y(Shape{d.n, d.co, d.ho, d.wo});
  float* yp = y.data();
#pragma omp parallel for schedule(static) if (d.co * np > kParallelFlops)
  for (int64_t c = 0; c < d.co; ++c)
    for (int64_t s = 0; s < d.n; ++s)
      std::copy_n(out_cm.data() + c * np + s * d.p(), d.p(), yp + (s * d.co + c) * d.p());
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvGeom& g) {
  const ConvDims d = conv_dims(x_shape, w.shape(), g);
  require_shape(gy, Shape{d.n, d.co, d.ho, d.wo}, "conv2d_input_grad grad_output");
  const int64_t np = d.n * d.p();
  const int64_t kk = d.k();
  // wt[K, Co]
  std::vector<float> wt(static_cast<size_t>(kk * d.co));
  for (int64_t o = 0; o < d.co; ++o)
    for (int64_t r = 0; r < kk; ++r) wt[static_cast<size_t>(r * d.co + o)] = w[o * kk + r];
  const Buffer gy_cm = batch_to_channel_major(gy, d.n, d.co, d.p());
  Buffer col(kk * np);
  gemm(kk, np, d.co, wt.data(), gy_cm.data(), col.data(), false);

  Tensor gx(x_shape, 0.0f);
  float* gxp = gx.data();
#pragma omp parallel for collapse(2) schedule(static) if (kk * np > kParallelFlops)
  for (int64_t s = 0; s < d.n; ++s) {
    for (int64_t c = 0; c < d.ci; ++c) {
      float* dst = gxp + (s * d.ci + c) * d.h * d.w;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const float* src = col.data() + ((c * d.kh + ky) * d.kw + kx) * np + s * d.p();
          int64_t ylo, yhi, xlo, xhi;
          valid_range(d.h, d.ho, ky, g, ylo, yhi);
          valid_range(d.w, d.wo, kx, g, xlo, xhi);
          for (int64_t oy = ylo; oy < yhi; ++oy) {
            const int64_t base = (oy * g.stride - g.pad + ky) * d.w + kx - g.pad;
            const float* srow = src + oy * d.wo;
            for (int64_t ox = xlo; ox < xhi; ++ox) dst[base + ox * g.stride] += srow[ox];
          }
        }
      }
    }
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, const ConvGeom& g) {
  const ConvDims d = conv_dims(x.shape(), w_shape, g);
  require_shape(gy, Shape{d.n, d.co, d.ho, d.wo}, "conv2d_weight_grad grad_output");
  const int64_t np = d.n * d.p();
  const Buffer col = im2col(x, d, g);
  const Buffer gy_cm = batch_to_channel_major(gy, d.n, d.co, d.p());
  Tensor gw(w_shape);
  gemm_nt(d.co, d.k(), np, gy_cm.data(), col.data(), gw.data());
  return gw;
}

Tensor group_norm_forward(const Tensor& x, int64_t groups, float eps, NormStats* stats) {
  require_rank(x, 4, "group_norm");
  const int64_t n = x.dim(0), c = x.dim(1);
  if (groups < 1 || c % groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(c) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  const int64_t slice = (c / groups) * x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  std::vector<float> means(static_cast<size_t>(n * groups)), rstds(static_cast<size_t>(n * groups));
  const float* xp = x.data();
  float* yp = y.data();
#pragma omp parallel for schedule(static) if (x.numel() > kParallelFlops)
  for (int64_t s = 0; s < n * groups; ++s) {
    const float* src = xp + s * slice;
    double sum = 0.0;
    for (int64_t i = 0; i < slice; ++i) sum += src[i];
    const double mean = sum / static_cast<double>(slice);
    double sq = 0.0;
    for (int64_t i = 0; i < slice; ++i) {
      const double dv = src[i] - mean;
      sq += dv * dv;
    }
    const double var = sq / static_cast<double>(slice);
    const auto rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
    const auto meanf = static_cast<float>(mean);
    float* dst = yp + s * slice;
    for (int64_t i = 0; i < slice; ++i) dst[i] = (src[i] - meanf) * rstd;
    means[static_cast<size_t>(s)] = meanf;
    rstds[static_cast<size_t>(s)] = rstd;
  }
  if (stats) {
    stats->mean = std::move(means);
    stats->rstd = std::move(rstds);
  }
  return y;
}

Tensor group_norm_backward(const Tensor& gy, const Tensor& y, const NormStats& stats, int64_t groups) {
  const int64_t n = y.dim(0), c = y.dim(1);
  const int64_t slice = (c / groups) * y.dim(2) * y.dim(3);
  Tensor gx(y.shape());
  const float* gp = gy.data();
  const float* yp = y.data();
  float* gxp = gx.data();
#pragma omp parallel for schedule(static) if (y.numel() > kParallelFlops)
  for (int64_t s = 0; s < n * groups; ++s) {
    const float* g = gp + s * slice;
    const float* yy = yp + s * slice;
    double sg = 0.0, sgy = 0.0;
    for (int64_t i = 0; i < slice; ++i) {
      sg += g[i];
      sgy += static_cast<double>(g[i]) * yy[i];
    }
    const auto mg = static_cast<float>(sg / static_cast<double>(slice));
    const auto mgy = static_cast<float>(sgy / static_cast<double>(slice));
    const float rstd = stats.rstd[static_cast<size_t>(s)];
    float* dst = gxp + s * slice;
    for (int64_t i = 0; i < slice; ++i) dst[i] = rstd * (g[i] - mg - yy[i] * mgy);
  }
  return gx;
}

}  // namespace kernels

namespace reference {

void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c, bool accumulate) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      float acc = accumulate ? c[i * n + j] : 0.0f;
      for (int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeom& g) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci) throw std::invalid_argument("reference conv2d channel mismatch");
  const int64_t ho = conv_out_size(h, kh, g), wo = conv_out_size(wd, kw, g);
  Tensor y(Shape{n, co, ho, wo});
  for (int64_t s = 0; s < n; ++s)
    for (int64_t o = 0; o < co; ++o)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int64_t c = 0; c < ci; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.at(s, c, iy, ix)) * w.at(o, c, ky, kx);
              }
          y.at(s, o, oy, ox) = static_cast<float>(acc);
        }
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvGeom& g) {
  const int64_t n = x_shape[0], ci = x_shape[1], h = x_shape[2], wd = x_shape[3];
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t ho = gy.dim(2), wo = gy.dim(3);
  std::vector<double> acc(static_cast<size_t>(shape_numel(x_shape)), 0.0);
  for (int64_t s = 0; s < n; ++s)
    for (int64_t o = 0; o < co; ++o)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox)
          for (int64_t c = 0; c < ci; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc[static_cast<size_t>(((s * ci + c) * h + iy) * wd + ix)] +=
                    static_cast<double>(gy.at(s, o, oy, ox)) * w.at(o, c, ky, kx);
              }
  Tensor gx(x_shape);
  for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = static_cast<float>(acc[static_cast<size_t>(i)]);
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, const ConvGeom& g) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w_shape[0], kh = w_shape[2], kw = w_shape[3];
  const int64_t ho = gy.dim(2), wo = gy.dim(3);
  Tensor gw(w_shape);
  for (int64_t o = 0; o < co; ++o)
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          double acc = 0.0;
          for (int64_t s = 0; s < n; ++s)
            for (int64_t oy = 0; oy < ho; ++oy)
              for (int64_t ox = 0; ox < wo; ++ox) {
                const int64_t iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.at(s, c, iy, ix)) * gy.at(s, o, oy, ox);
              }
          gw.at(o, c, ky, kx) = static_cast<float>(acc);
        }
  return gw;
}

Tensor group_norm_forward(const Tensor& x, int64_t groups, float eps) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const int64_t cg = c / groups;
  Tensor y(x.shape());
  for (int64_t s = 0; s < n; ++s)
    for (int64_t gi = 0; gi < groups; ++gi) {
      double sum = 0.0, sq = 0.0;
      for (int64_t ch = gi * cg; ch < (gi + 1) * cg; ++ch)
        for (int64_t i = 0; i < hw; ++i) sum += x[(s * c + ch) * hw + i];
      const double mean = sum / static_cast<double>(cg * hw);
      for (int64_t ch = gi * cg; ch < (gi + 1) * cg; ++ch)
        for (int64_t i = 0; i < hw; ++i) {
          const double dv = x[(s * c + ch) * hw + i] - mean;
          sq += dv * dv;
        }
      const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(cg * hw) + eps);
      for (int64_t ch = gi * cg; ch < (gi + 1) * cg; ++ch)
        for (int64_t i = 0; i < hw; ++i)
          y[(s * c + ch) * hw + i] = static_cast<float>((x[(s * c + ch) * hw + i] - mean) * rstd);
    }
  return y;
}

}  // namespace reference

}  // namespace vstain
