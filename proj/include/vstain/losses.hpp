// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vstain/nn.hpp"

namespace vstain {

/// Frozen multi-layer feature extractor used as a perceptual distance.
/// Inputs are [N,3,H,W] in [-1,1].
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  virtual std::vector<Var> features(const Var& img) const = 0;
  /// Sum over layers of the batch- and space-averaged squared distance
  /// between channel-normalized features.
  virtual Var distance(const Var& a, const Var& b) const;
};

/// Seeded random ReLU conv stack: 3->8 (stride 1), 8->16 (stride 2),
/// 16->16 (stride 2); every activation is a feature layer.
class RandomConvExtractor : public PerceptualExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed);
  std::vector<Var> features(const Var& img) const override;

 private:
  std::vector<Var> weights_;
  std::vector<ConvGeom> geoms_;
};

/// Sum over sides of weight * extractor distance after bilinear resizing
/// both images to side x side.
Var perceptual_loss(const Var& gen, const Var& target, const PerceptualExtractor& extractor,
                    const std::vector<int64_t>& sides, const std::vector<double>& weights);
/// Mean |gen - target| after area-downsampling both to side x side.
Var l1_at(const Var& gen, const Var& target, int64_t side);
inline Var l1_64(const Var& gen, const Var& target) { return l1_at(gen, target, 64); }
/// Sum over sides of mean |Sobel(gen) - Sobel(hne)| at area-downsampled sizes.
/// The reference is always the H&E input.
Var edge_loss(const Var& gen, const Var& hne, const std::vector<int64_t>& sides);
/// Area downsampling by an integer factor.
Var area_downsample(const Var& x, int64_t side);

struct LossWeights {
  double percept = 1.0;
  double l1 = 1.0;
  double edge = 0.5;
  double adv = 1.0;
  double fm = 10.0;
  double dab = 0.2;
};

/// Component values for one batch. Undefined terms count as zero.
struct LossTerms {
  Var percept, l1, edge, adv, fm, dab;
};

struct LossBundle {
  std::vector<std::pair<std::string, double>> components;
  double total = 0.0;
  Var total_var;  // differentiable total
  double component(const std::string& name) const;
};

/// Weighted sum; adversarial and feature-matching terms are gated off while
/// step < adv_start. Throws NumericError naming any non-finite component.
LossBundle total_generator_loss(const LossTerms& terms, const LossWeights& w, int64_t step, int64_t adv_start);

/// Appends one JSON object per step to a line-delimited log.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path, bool append = false);
  void write(int64_t step, const LossBundle& bundle, const std::vector<std::pair<std::string, double>>& extra = {});

 private:
  std::ofstream out_;
};

struct LossRecord {
  int64_t step = 0;
  std::vector<std::pair<std::string, double>> values;
};
std::vector<LossRecord> read_loss_log(const std::filesystem::path& path);

}  // namespace vstain
