// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "vstain/nn.hpp"

namespace vstain {

struct GeneratorConfig {
  int64_t in_channels = 3;
  int64_t resolution = 512;
  std::vector<int64_t> encoder_channels{64, 128, 256, 512, 512};
  int bottleneck_blocks = 4;
  bool attention = true;
  int64_t embedding_dim = 64;
  int num_classes = 4;
  int64_t cond_channels = 512;
  int num_cond_scales = 4;
  int64_t edge_channels = 32;
  int64_t head_channels = 32;
  int64_t spade_hidden = 128;
  bool edge_encoder = true;

  int depth() const { return static_cast<int>(encoder_channels.size()); }
  int64_t bottleneck_side() const { return resolution >> depth(); }
  /// Side of decoder stage j (0 = coarsest); stage depth()-1 is the head.
  int64_t stage_side(int j) const { return bottleneck_side() << (j + 1); }
  /// Side of the coarsest conditioning map.
  int64_t cond_grid() const { return stage_side(0); }
  int null_index() const { return num_classes; }
  void validate() const;
};

/// Adds one encoder level in front of the first and one decoder level behind
/// the head, doubling resolution while keeping the bottleneck side.
GeneratorConfig build_1024_variant(const GeneratorConfig& cfg);

/// Horizontal and vertical Sobel responses of the luminance, replicate padded.
/// [N,3,H,W] -> [N,2,H,W].
Var sobel_gradients(const Var& img);

/// Per-sample conditioning for one generator call.
struct Conditioning {
  std::vector<Var> maps;  // one per SPADE stage, coarsest first
  std::vector<int> tokens;
  std::vector<bool> drop_uni;
  std::vector<bool> drop_cls;
};

class SpadeFilm : public Module {
 public:
  SpadeFilm(int64_t channels, int64_t cond_channels, int64_t hidden, int64_t embedding_dim, Rng& rng);
  /// IN(h) * (gamma_u + gamma_c) + (beta_u + beta_c).
  Var forward(const Var& h, const Var& u, const Var& e) const;

  Conv2d shared, gamma, beta;
  Linear film;
  int64_t channels;
};

class EdgeEncoder : public Module {
 public:
  EdgeEncoder(const std::vector<int64_t>& sides, int64_t channels, Rng& rng);
  /// img: [N,3,R,R] signed. Returns one map per side, same order as `sides`.
  std::vector<Var> forward(const Var& img) const;

  std::vector<int64_t> sides;
  int64_t channels;
  std::vector<std::unique_ptr<Conv2d>> convs;  // two per scale
};

class ResBlock : public Module {
 public:
  ResBlock(int64_t channels, Rng& rng);
  Var forward(const Var& x) const;
  Conv2d conv1, conv2;
};

class SelfAttention : public Module {
 public:
  SelfAttention(int64_t channels, Rng& rng);
  Var forward(const Var& x) const;
  Conv2d query, key, value, out;
  int64_t key_channels;
};

class Generator : public Module {
 public:
  Generator(const GeneratorConfig& cfg, Rng& rng);
  /// hne: [N,3,R,R] in [-1,1]. Output has the same shape, in [-1,1].
  Var forward(const Var& hne, const Conditioning& cond) const;

  const GeneratorConfig& config() const { return cfg_; }

  Var embedding;  // [(num_classes + 1), embedding_dim]
  std::vector<std::unique_ptr<Conv2d>> encoder;
  std::vector<std::unique_ptr<ResBlock>> bottleneck;
  std::unique_ptr<SelfAttention> attention;
  std::unique_ptr<EdgeEncoder> edges;
  std::vector<std::unique_ptr<Conv2d>> reduce;
  std::vector<std::unique_ptr<SpadeFilm>> spade;  // one per SPADE stage
  std::unique_ptr<Conv2d> output;

 private:
  GeneratorConfig cfg_;
};

}  // namespace vstain
