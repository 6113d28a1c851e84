// SPDX-License-Identifier: Apache-2.0
#include "vstain/backbone.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vstain {
namespace {

constexpr char kCacheMagic[4] = {'V', 'S', 'T', 'F'};
constexpr uint32_t kCacheVersion = 1;

static_assert(std::endian::native == std::endian::little, "feature cache I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::string& what) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("feature cache truncated reading " + what);
  return v;
}

}  // namespace

ToyBackbone::ToyBackbone(uint64_t seed, int64_t token_dim, int64_t native_side, int64_t patch)
    : dim_(token_dim), side_(native_side), patch_(patch), weight_(Shape{token_dim, 3, 4, 4}), bias_(Shape{token_dim}) {
  if (token_dim < 1) throw std::invalid_argument("toy backbone: token_dim must be positive");
  if (patch < 4 || patch % 4 != 0) throw std::invalid_argument("toy backbone: patch must be a positive multiple of 4");
  if (native_side % patch != 0) throw std::invalid_argument("toy backbone: native side must be a multiple of patch");
  Rng rng(seed);
  init_tensor(weight_, Init::kNormal, 0, rng, 2.0 / std::sqrt(48.0));
  init_tensor(bias_, Init::kNormal, 0, rng, 0.1);
}

Tensor ToyBackbone::patch_tokens(const Tensor& images) const {
  require_rank(images, 4, "toy backbone input");
  if (images.dim(1) != 3 || images.dim(2) != side_ || images.dim(3) != side_)
    throw std::invalid_argument("toy backbone expects [B,3," + std::to_string(side_) + "," + std::to_string(side_) +
                                "], got " + shape_str(images.shape()));
  Tensor centered = images;
  for (int64_t i = 0; i < centered.numel(); ++i) centered[i] -= 0.5f;
  Tensor pooled = avg_pool2d(centered, static_cast<int>(patch_ / 4));
  Tensor t = kernels::conv2d_forward(pooled, weight_, ConvGeom{4, 0});
  const int64_t b = t.dim(0), hw = t.dim(2) * t.dim(3);
  for (int64_t s = 0; s < b; ++s)
    for (int64_t c = 0; c < dim_; ++c) {
      float* row = t.data() + (s * dim_ + c) * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] = std::tanh(row[i] + bias_[c]);
    }
  return t;
}

Tensor ToyBackbone::cls(const Tensor& images) const {
  Tensor t = patch_tokens(images);
  const int64_t b = t.dim(0), hw = t.dim(2) * t.dim(3);
  Tensor out(Shape{b, dim_});
  for (int64_t s = 0; s < b; ++s)
    for (int64_t c = 0; c < dim_; ++c) {
      double acc = 0.0;
      const float* row = t.data() + (s * dim_ + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += row[i];
      out[s * dim_ + c] = static_cast<float>(acc / static_cast<double>(hw));
    }
  return out;
}

Tensor extract_subcrop_tokens(const Tensor& images, const Backbone& backbone, int64_t grid) {
  require_rank(images, 4, "extract_subcrop_tokens");
  const int64_t b = images.dim(0), r = images.dim(2);
  if (images.dim(1) != 3 || images.dim(3) != r) throw std::invalid_argument("extract_subcrop_tokens expects square RGB images");
  if (r % 4 != 0) throw std::invalid_argument("extract_subcrop_tokens: image side " + std::to_string(r) + " not divisible by 4");
  const int64_t c = r / 4, side = backbone.native_side(), d = backbone.token_dim();
  Tensor crops(Shape{b * 16, 3, c, c});
  for (int64_t s = 0; s < b; ++s)
    for (int64_t k = 0; k < 16; ++k) {
      const int64_t oy = (k / 4) * c, ox = (k % 4) * c;
      for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < c; ++y)
          std::memcpy(crops.data() + (((s * 16 + k) * 3 + ch) * c + y) * c,
                      images.data() + ((s * 3 + ch) * r + oy + y) * r + ox, sizeof(float) * static_cast<size_t>(c));
    }
  Tensor tokens = backbone.patch_tokens(resize_bicubic(crops, side, side));
  const int64_t g = tokens.dim(2);
  if (tokens.dim(1) != d || tokens.dim(3) != g) throw std::logic_error("backbone returned malformed token grid");
  Tensor full(Shape{b, d, 4 * g, 4 * g});
  for (int64_t s = 0; s < b; ++s)
    for (int64_t k = 0; k < 16; ++k) {
      const int64_t oy = (k / 4) * g, ox = (k % 4) * g;
      for (int64_t ch = 0; ch < d; ++ch)
        for (int64_t y = 0; y < g; ++y)
          std::memcpy(full.data() + ((s * d + ch) * 4 * g + oy + y) * 4 * g + ox,
                      tokens.data() + (((s * 16 + k) * d + ch) * g + y) * g, sizeof(float) * static_cast<size_t>(g));
    }
  return 4 * g == grid ? full : adaptive_avg_pool2d(full, grid, grid);
}

Tensor extract_cls(const Tensor& images, const Backbone& backbone) {
  return backbone.cls(resize_bicubic(images, backbone.native_side(), backbone.native_side()));
}

FeatureProcessor::FeatureProcessor(const ProcessorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.num_scales < 1) throw std::invalid_argument("processor: num_scales must be positive");
  if (cfg.channels % cfg.groups != 0) throw std::invalid_argument("processor: channels must be divisible by groups");
  project_ = std::make_unique<Conv2d>(cfg.token_dim, cfg.channels, 1, 1, 0, true, rng);
  add_child("project", *project_);
  for (int i = 0; i < cfg.residual_blocks; ++i)
    for (int j = 0; j < 2; ++j) {
      refine_.push_back(std::make_unique<Conv2d>(cfg.channels, cfg.channels, 3, 1, 1, true, rng));
      add_child("refine." + std::to_string(i) + "." + std::to_string(j), *refine_.back());
    }
  for (int i = 1; i < cfg.num_scales; ++i) {
    up_.push_back(std::make_unique<ConvTranspose2d>(cfg.channels, cfg.channels, 2, 2, 0, true, rng));
    add_child("up." + std::to_string(i), *up_.back());
  }
}

std::vector<Var> FeatureProcessor::forward(const Var& tokens) const {
  require_rank(tokens.value(), 4, "processor input");
  if (tokens.dim(1) != cfg_.token_dim)
    throw std::invalid_argument("processor: expected token dim " + std::to_string(cfg_.token_dim) + ", got " +
                                shape_str(tokens.shape()));
  Var x = project_->forward(tokens);
  for (int i = 0; i < cfg_.residual_blocks; ++i) {
    Var h = refine_[2 * i]->forward(leaky_relu(group_norm(x, cfg_.groups), 0.2f));
    h = refine_[2 * i + 1]->forward(leaky_relu(group_norm(h, cfg_.groups), 0.2f));
    x = add(x, h);
  }
  std::vector<Var> maps{x};
  for (const auto& up : up_) maps.push_back(up->forward(maps.back()));
  return maps;
}

void write_feature_cache(const std::filesystem::path& path, const FeatureRecord& record) {
  const Tensor& t = record.tokens;
  require_rank(t, 3, "feature cache tokens");
  const int64_t d = t.dim(0), g = t.dim(1);
  if (t.dim(2) != g) throw std::invalid_argument("feature cache tokens must be square");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open feature cache for writing: " + path.string());
  f.write(kCacheMagic, 4);
  put(f, kCacheVersion);
  put(f, static_cast<uint32_t>(record.image_id.size()));
  f.write(record.image_id.data(), static_cast<std::streamsize>(record.image_id.size()));
  put(f, static_cast<uint32_t>(g));
  put(f, static_cast<uint32_t>(d));
  std::vector<float> hwd(static_cast<size_t>(g * g * d));
  for (int64_t y = 0; y < g; ++y)
    for (int64_t x = 0; x < g; ++x)
      for (int64_t c = 0; c < d; ++c) hwd[static_cast<size_t>((y * g + x) * d + c)] = t[(c * g + y) * g + x];
  f.write(reinterpret_cast<const char*>(hwd.data()), static_cast<std::streamsize>(hwd.size() * sizeof(float)));
  if (!f) throw std::runtime_error("failed writing feature cache: " + path.string());
}

FeatureRecord read_feature_cache(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open feature cache: " + path.string());
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kCacheMagic, 4) != 0)
    throw std::runtime_error("not a feature cache file: " + path.string());
  const auto version = get<uint32_t>(f, "version");
  if (version != kCacheVersion)
    throw std::runtime_error("feature cache version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCacheVersion) + ")");
  FeatureRecord rec;
  rec.image_id.resize(get<uint32_t>(f, "id length"));
  if (!f.read(rec.image_id.data(), static_cast<std::streamsize>(rec.image_id.size())))
    throw std::runtime_error("feature cache truncated reading id");
  const int64_t g = get<uint32_t>(f, "grid"), d = get<uint32_t>(f, "dim");
  std::vector<float> hwd(static_cast<size_t>(g * g * d));
  if (!f.read(reinterpret_cast<char*>(hwd.data()), static_cast<std::streamsize>(hwd.size() * sizeof(float))))
    throw std::runtime_error("feature cache truncated reading tokens: " + path.string());
  rec.tokens = Tensor(Shape{d, g, g});
  for (int64_t y = 0; y < g; ++y)
    for (int64_t x = 0; x < g; ++x)
      for (int64_t c = 0; c < d; ++c) rec.tokens[(c * g + y) * g + x] = hwd[static_cast<size_t>((y * g + x) * d + c)];
  return rec;
}

}  // namespace vstain
