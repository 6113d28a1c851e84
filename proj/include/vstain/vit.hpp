// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "vstain/backbone.hpp"

namespace vstain {

/// Tensors of a safetensors file converted to float32. Supports F32, F16 and BF16.
std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path);
void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors);

/// Frozen pre-norm vision transformer with timm parameter names
/// (patch_embed.proj, cls_token, pos_embed, blocks.i.{norm1,attn.qkv,attn.proj,
/// ls1,norm2,mlp.fc1,mlp.fc2,ls2}, norm). Layer scales are optional. Inputs
/// in [0,1] are normalized with ImageNet statistics; heads are d/64.
class VitBackbone : public Backbone {
 public:
  VitBackbone(const std::filesystem::path& weights, int64_t native_side);
  explicit VitBackbone(std::map<std::string, Tensor> weights, int64_t native_side = 224);
  int64_t token_dim() const override { return dim_; }
  int64_t native_side() const override { return side_; }
  int64_t patch_grid() const override { return side_ / patch_; }
  Tensor patch_tokens(const Tensor& images) const override;
  Tensor cls(const Tensor& images) const override;
  int depth() const { return depth_; }

 private:
  /// Final normalized token sequence for one image: [1+g*g, d].
  Tensor encode(const Tensor& image) const;
  const Tensor& w(const std::string& name) const;

  std::map<std::string, Tensor> w_;
  int64_t dim_ = 0, side_ = 224, patch_ = 16, heads_ = 1;
  int depth_ = 0;
};

}  // namespace vstain
