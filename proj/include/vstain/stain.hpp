// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "vstain/autograd.hpp"

namespace vstain {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

/// Stain basis in optical-density space. Rows are hematoxylin, residual and
/// DAB, each with unit norm.
class StainMatrix {
 public:
  /// Normalizes the given rows. Throws if the matrix is singular.
  explicit StainMatrix(const Mat3& rows);
  /// Hematoxylin and DAB rows; the residual row is their normalized cross product.
  static StainMatrix from_two(const Vec3& hematoxylin, const Vec3& dab);
  static StainMatrix h_dab();

  const Mat3& rows() const { return rows_; }
  const Mat3& inverse() const { return inverse_; }

 private:
  Mat3 rows_;
  Mat3 inverse_;
};

enum class KlDirection { kRealGen, kGenReal };

struct StainConfig {
  StainMatrix matrix = StainMatrix::h_dab();
  double od_eps = 1.0 / 255.0;
  double hist_lo = 0.0;
  double hist_hi = 3.0;
  int hist_bins = 256;
  double hist_smoothing = 1e-8;
  double top_fraction = 0.10;
  KlDirection kl_direction = KlDirection::kRealGen;
};

/// Planar double-precision image: three [H*W] planes.
struct Planes {
  int64_t h = 0, w = 0;
  std::array<std::vector<double>, 3> c;
};

/// Thrown by pearson_r when either input has zero variance.
class ConstantInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// OD = -log10(max(p, eps)) per channel. img: [3,H,W] in [0,1].
Planes rgb_to_od(const Tensor& img, double eps);
/// Per-pixel concentrations solving od = c^T M, clamped at 0. Index 2 is DAB.
Planes deconvolve(const Planes& od, const StainMatrix& m);
/// Inverse Beer-Lambert: rgb = 10^(-c^T M). Returns [3,H,W].
Tensor render_concentrations(const Planes& conc, const StainMatrix& m);
/// DAB concentration plane of a unit-range [3,H,W] image.
std::vector<double> dab_channel(const Tensor& img, const StainConfig& cfg);

/// Number of entries averaged by the top-fraction rule: ceil(fraction * n).
int64_t top_count(int64_t n, double fraction);
double dab_intensity_score(std::span<const double> dab, double top_fraction);
/// Histogram over [lo, hi] with `smoothing` added to every bin count, then
/// normalized. Values outside the range are clamped
/// into the edge bins.
std::vector<double> dab_histogram(std::span<const double> dab, int bins, double lo, double hi, double smoothing);
/// sum p ln(p / q).
double kl_divergence(std::span<const double> p, std::span<const double> q);
double dab_kl(std::span<const double> gen, std::span<const double> real, const StainConfig& cfg);
double pearson_r(std::span<const double> xs, std::span<const double> ys);

/// Mean over the batch of |score(generated) - score(target)|. generated:
/// [N,3,H,W] in [0,1], target treated as constant.
Var dab_loss(const Var& generated, const Tensor& target, const StainConfig& cfg);

}  // namespace vstain
