// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vstain/losses.hpp"
#include "vstain/stain.hpp"
#include "vstain/training.hpp"

namespace vstain {

/// Origins (y, x) of the four non-overlapping quadrants, row-major.
std::array<std::pair<int64_t, int64_t>, 4> quadrant_origins(int64_t crop);
/// Four crop x crop quadrants of a [3,2*crop,2*crop] image.
std::vector<Tensor> deterministic_test_crops(const Tensor& img, int64_t crop);

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), valid
/// positions only, data range 1. Inputs are [3,H,W] in [0,1], H and W >= 11.
double ssim(const Tensor& a, const Tensor& b);

/// Rows are samples. Covariances use the n-1 normalizer. When n <= dim the
/// diagonal gets `shrinkage`; with shrinkage 0 that case is an error.
double fid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake, double shrinkage = 1e-6);
/// Unbiased MMD^2 with kernel (x.y / dim + 1)^3. Not scaled by 1000.
double kid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake);

/// Frozen image embedding for FID/KID. Input [3,H,W] in [0,1].
class ImageFeatureExtractor {
 public:
  virtual ~ImageFeatureExtractor() = default;
  virtual int64_t dim() const = 0;
  virtual Eigen::VectorXd features(const Tensor& img) const = 0;
};

/// Seeded random 4x4 stride-4 ReLU convolution on a 64x64 resize, mean and
/// standard deviation pooled over positions.
class RandomProjectionFeatures : public ImageFeatureExtractor {
 public:
  RandomProjectionFeatures(uint64_t seed, int64_t dim);
  int64_t dim() const override { return 2 * width_; }
  Eigen::VectorXd features(const Tensor& img) const override;

 private:
  int64_t width_;
  Tensor weight_, bias_;
};

struct StainMetrics {
  double fid = 0.0, kid_x1000 = 0.0, ssim = 0.0, lpips = 0.0;
  std::optional<double> pearson_r;  // empty when a score list is constant
  double dab_kl = 0.0;
  int64_t n_images = 0, n_crops = 0;
};

struct MetricReport {
  std::map<std::string, StainMetrics> per_stain;
  StainMetrics macro;  // unweighted mean over stains (pearson over defined values)
  int64_t n_models = 1;
  int64_t params = 0;
  int64_t resolution = 0;
  bool unified = false;
  int64_t step = 0;
  int64_t skipped = 0;
  std::string protocol;
};

MetricReport macro_average(MetricReport report);

struct EvalOptions {
  int64_t crop = 512;
  double fid_shrinkage = 1e-6;
  std::optional<std::filesystem::path> image_dir;  // writes {source_id}_crop{k}.png
};

/// Per-crop results kept for downstream analysis.
struct CropResult {
  std::string source_id, stain;
  int crop = 0;
  double ssim = 0, lpips = 0, dab_kl = 0, score_gen = 0, score_real = 0;
};

/// Generated images for one pair; callers may substitute ground truth to
/// evaluate the metric ceiling.
using Generate = std::function<Tensor(const Tensor& hne_unit_crop, const PairedSample& s)>;

MetricReport evaluate_pairs(const std::vector<PairedSample>& samples, const Generate& generate,
                            const ImageFeatureExtractor& features, const PerceptualExtractor& perceptual,
                            const StainConfig& stain, const EvalOptions& opt, std::vector<CropResult>* crops = nullptr);

/// Loads the EMA generator and evaluates it on the test samples.
MetricReport evaluate_run(const std::filesystem::path& checkpoint, const std::vector<PairedSample>& test,
                          const EvalOptions& opt, std::vector<CropResult>* crops = nullptr);

/// Trainable generator-side parameters (processor + generator).
int64_t generator_side_parameters(const ModelConfig& cfg);

struct ParamReport {
  int64_t base = 0, variant = 0;
  double relative_increase = 0.0;
};
/// Parameter counts of `cfg` and its one-level-deeper variant.
ParamReport parameter_overhead(const ModelConfig& cfg);

nlohmann::ordered_json report_json(const MetricReport& r);
std::string report_text(const MetricReport& r);

}  // namespace vstain
