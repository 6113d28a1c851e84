// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vstain/nn.hpp"

namespace vstain {

/// Frozen feature extractor. Inputs are [B,3,S,S] images in [0,1] with
/// S == native_side(); it never records gradients.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual int64_t token_dim() const = 0;
  virtual int64_t native_side() const = 0;
  /// Tokens per side produced for one native-side input.
  virtual int64_t patch_grid() const = 0;
  /// [B,3,S,S] -> [B,d,g,g].
  virtual Tensor patch_tokens(const Tensor& images) const = 0;
  /// [B,3,S,S] -> [B,d] global summary vector.
  virtual Tensor cls(const Tensor& images) const = 0;
};

/// Seeded fixed random projection of local 4x4 sub-block means per patch,
/// squashed by tanh. Deterministic for a fixed seed.
class ToyBackbone : public Backbone {
 public:
  ToyBackbone(uint64_t seed, int64_t token_dim = 1024, int64_t native_side = 224, int64_t patch = 16);
  int64_t token_dim() const override { return dim_; }
  int64_t native_side() const override { return side_; }
  int64_t patch_grid() const override { return side_ / patch_; }
  Tensor patch_tokens(const Tensor& images) const override;
  Tensor cls(const Tensor& images) const override;
  const Tensor& projection() const { return weight_; }

 private:
  int64_t dim_, side_, patch_;
  Tensor weight_;  // [d, 3, 4, 4]
  Tensor bias_;    // [d]
};

/// Splits each [3,R,R] image into a 4x4 grid of sub-crops (row-major), runs
/// each crop through the backbone at its native side, reassembles the crop
/// token grids and average-pools to grid x grid. Returns [B,d,grid,grid].
Tensor extract_subcrop_tokens(const Tensor& images, const Backbone& backbone, int64_t grid);

/// Global embedding of whole images resized to the backbone's native side.
Tensor extract_cls(const Tensor& images, const Backbone& backbone);

struct ProcessorConfig {
  int64_t token_dim = 1024;
  int64_t channels = 512;
  int residual_blocks = 2;
  int64_t groups = 32;
  int num_scales = 4;
};

/// Learned adapter from a token grid to one conditioning map per decoder
/// SPADE stage: 1x1 projection, residual refinement at grid resolution, then
/// stride-2 transposed convolutions for each finer scale.
class FeatureProcessor : public Module {
 public:
  FeatureProcessor(const ProcessorConfig& cfg, Rng& rng);
  /// tokens: [N,d,G,G] -> maps at G, 2G, ..., coarsest first.
  std::vector<Var> forward(const Var& tokens) const;
  const ProcessorConfig& config() const { return cfg_; }

 private:
  ProcessorConfig cfg_;
  std::unique_ptr<Conv2d> project_;
  std::vector<std::unique_ptr<Conv2d>> refine_;  // two per residual block
  std::vector<std::unique_ptr<ConvTranspose2d>> up_;
};

/// One cached token grid. Tokens are stored as [d,G,G] in memory and as
/// row-major (G,G,d) little-endian float32 on disk.
struct FeatureRecord {
  std::string image_id;
  Tensor tokens;
};

void write_feature_cache(const std::filesystem::path& path, const FeatureRecord& record);
FeatureRecord read_feature_cache(const std::filesystem::path& path);

}  // namespace vstain
