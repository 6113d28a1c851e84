// SPDX-License-Identifier: Apache-2.0
#include "vstain/stain.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "vstain/ops.hpp"

namespace vstain {
namespace {

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("stain vector must be nonzero and finite");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double det3(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Mat3 invert3(const Mat3& m) {
  const double d = det3(m);
  if (!(std::abs(d) > 1e-12)) throw std::invalid_argument("stain matrix is singular");
  Mat3 inv{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const int r1 = (c + 1) % 3, r2 = (c + 2) % 3, c1 = (r + 1) % 3, c2 = (r + 2) % 3;
      inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / d;
    }
  return inv;
}

}  // namespace

StainMatrix::StainMatrix(const Mat3& rows) {
  for (int i = 0; i < 3; ++i) rows_[i] = normalized(rows[i]);
  inverse_ = invert3(rows_);
}

StainMatrix StainMatrix::from_two(const Vec3& hematoxylin, const Vec3& dab) {
  const Vec3 h = normalized(hematoxylin), d = normalized(dab);
  return StainMatrix(Mat3{h, normalized(cross(h, d)), d});
}

StainMatrix StainMatrix::h_dab() { return from_two({0.650, 0.704, 0.286}, {0.269, 0.568, 0.872}); }

Planes rgb_to_od(const Tensor& img, double eps) {
  require_rank(img, 3, "rgb_to_od");
  if (img.dim(0) != 3) throw std::invalid_argument("rgb_to_od expects 3 channels, got " + shape_str(img.shape()));
  if (!(eps > 0.0)) throw std::invalid_argument("rgb_to_od: eps must be positive");
  Planes od;
  od.h = img.dim(1);
  od.w = img.dim(2);
  const int64_t hw = od.h * od.w;
  for (int c = 0; c < 3; ++c) {
    auto& plane = od.c[static_cast<size_t>(c)];
    plane.resize(static_cast<size_t>(hw));
    for (int64_t i = 0; i < hw; ++i) {
      const double p = img[c * hw + i];
      if (!std::isfinite(p)) throw std::domain_error("rgb_to_od: non-finite pixel value");
      plane[static_cast<size_t>(i)] = -std::log10(std::max(p, eps));
    }
  }
  return od;
}

Planes deconvolve(const Planes& od, const StainMatrix& m) {
  const Mat3& inv = m.inverse();
  Planes conc;
  conc.h = od.h;
  conc.w = od.w;
  const size_t hw = od.c[0].size();
  for (auto& plane : conc.c) plane.resize(hw);
  for (size_t i = 0; i < hw; ++i) {
    const Vec3 v{od.c[0][i], od.c[1][i], od.c[2][i]};
    for (int s = 0; s < 3; ++s) {
      // Row vector times inverse: c_s = sum_k od_k * inv[k][s].
      const double c = v[0] * inv[0][s] + v[1] * inv[1][s] + v[2] * inv[2][s];
      conc.c[static_cast<size_t>(s)][i] = std::max(c, 0.0);
    }
  }
  return conc;
}

Tensor render_concentrations(const Planes& conc, const StainMatrix& m) {
  const Mat3& rows = m.rows();
  const int64_t hw = conc.h * conc.w;
  Tensor out(Shape{3, conc.h, conc.w});
  for (int64_t i = 0; i < hw; ++i)
    for (int ch = 0; ch < 3; ++ch) {
      double od = 0.0;
      for (int s = 0; s < 3; ++s) od += conc.c[static_cast<size_t>(s)][static_cast<size_t>(i)] * rows[s][ch];
      out[ch * hw + i] = static_cast<float>(std::pow(10.0, -od));
    }
  return out;
}

std::vector<double> dab_channel(const Tensor& img, const StainConfig& cfg) {
  return deconvolve(rgb_to_od(img, cfg.od_eps), cfg.matrix).c[2];
}

int64_t top_count(int64_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("top fraction must be in (0, 1]");
  const auto k = static_cast<int64_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<int64_t>(k, 1, n);
}

double dab_intensity_score(std::span<const double> dab, double top_fraction) {
  if (dab.empty()) throw std::invalid_argument("dab_intensity_score on an empty channel");
  const int64_t k = top_count(static_cast<int64_t>(dab.size()), top_fraction);
  std::vector<double> v(dab.begin(), dab.end());
  std::nth_element(v.begin(), v.begin() + (k - 1), v.end(), std::greater<>());
  double acc = 0.0;
  for (int64_t i = 0; i < k; ++i) acc += v[static_cast<size_t>(i)];
  return acc / static_cast<double>(k);
}

std::vector<double> dab_histogram(std::span<const double> dab, int bins, double lo, double hi, double smoothing) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("dab_histogram: invalid binning");
  if (!(smoothing > 0.0)) throw std::invalid_argument("dab_histogram: smoothing must be positive");
  std::vector<double> h(static_cast<size_t>(bins), 0.0);
  const double width = (hi - lo) / bins;
  for (double v : dab) {
    auto b = static_cast<int64_t>(std::floor((v - lo) / width));
    b = std::clamp<int64_t>(b, 0, bins - 1);
    h[static_cast<size_t>(b)] += 1.0;
  }
  double total = 0.0;
  for (double& x : h) {
    x += smoothing;
    total += x;
  }
  for (double& x : h) x /= total;
  return h;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  return std::max(acc, 0.0);
}

double dab_kl(std::span<const double> gen, std::span<const double> real, const StainConfig& cfg) {
  const auto pg = dab_histogram(gen, cfg.hist_bins, cfg.hist_lo, cfg.hist_hi, cfg.hist_smoothing);
  const auto pr = dab_histogram(real, cfg.hist_bins, cfg.hist_lo, cfg.hist_hi, cfg.hist_smoothing);
  return cfg.kl_direction == KlDirection::kRealGen ? kl_divergence(pr, pg) : kl_divergence(pg, pr);
}

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson_r: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("pearson_r needs at least two pairs");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ConstantInputError("pearson_r: correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Var dab_loss(const Var& generated, const Tensor& target, const StainConfig& cfg) {
  require_rank(generated.value(), 4, "dab_loss generated");
  if (generated.shape() != target.shape())
    throw std::invalid_argument("dab_loss: shape mismatch " + shape_str(generated.shape()) + " vs " +
                                shape_str(target.shape()));
  const int64_t n = generated.dim(0), h = generated.dim(2), w = generated.dim(3);
  Tensor targets(Shape{n});
  for (int64_t s = 0; s < n; ++s) {
    Tensor img(Shape{3, h, w});
    std::copy_n(target.data() + s * 3 * h * w, 3 * h * w, img.data());
    targets[s] = static_cast<float>(dab_intensity_score(dab_channel(img, cfg), cfg.top_fraction));
  }
  // Deconvolution as a 1x1 convolution onto the DAB row of the inverse.
  Tensor wdab(Shape{1, 3, 1, 1});
  for (int ch = 0; ch < 3; ++ch) wdab[ch] = static_cast<float>(cfg.matrix.inverse()[ch][2]);
  const float eps = static_cast<float>(cfg.od_eps);
  Var od = scale(log10(clamp_min(generated, eps)), -1.0f);
  Var dab = relu(conv2d(od, Var(wdab), Var(), ConvGeom{1, 0}));
  Var scores = topk_mean_per_sample(dab, cfg.top_fraction);
  return mean(abs(sub(scores, Var(targets))));
}

}  // namespace vstain
