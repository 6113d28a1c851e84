// SPDX-License-Identifier: Apache-2.0
#include "vstain/vit.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "vstain/errors.hpp"
#include "vstain/kernels.hpp"
#include "vstain/ops.hpp"

namespace vstain {
namespace {

float half_to_float(uint16_t h) {
  const uint32_t sign = (h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1f, mant = h & 0x3ff;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while (!(mant & 0x400)) {
        mant <<= 1;
        --exp;
      }
      bits = sign | (exp << 23) | ((mant & 0x3ff) << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

// y[T,out] = x[T,in] * W[out,in]^T + b
Tensor linear_rows(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int64_t t = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in) throw DataError("vit: linear width mismatch");
  Tensor y(Shape{t, out});
  kernels::gemm_nt(t, out, in, x.data(), weight.data(), y.data());
  if (bias.defined())
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < out; ++j) y[i * out + j] += bias[j];
  return y;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& g, const Tensor& b) {
  const int64_t t = x.dim(0), d = x.dim(1);
  Tensor y(x.shape());
  for (int64_t i = 0; i < t; ++i) {
    const float* r = x.data() + i * d;
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += r[j];
    mean /= static_cast<double>(d);
    for (int64_t j = 0; j < d; ++j) var += (r[j] - mean) * (r[j] - mean);
    const double rstd = 1.0 / std::sqrt(var / static_cast<double>(d) + 1e-6);
    for (int64_t j = 0; j < d; ++j) y[i * d + j] = static_cast<float>((r[j] - mean) * rstd) * g[j] + b[j];
  }
  return y;
}

}  // namespace

std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || header_len > (1ull << 30)) throw DataError("bad safetensors header in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const std::exception& e) {
    throw DataError("bad safetensors header in " + path.string() + ": " + e.what());
  }
  std::map<std::string, Tensor> out;
  for (auto& [name, info] : meta.items()) {
    if (name == "__metadata__") continue;
    const std::string dtype = info.at("dtype");
    Shape shape = info.at("shape").get<Shape>();
    const auto off = info.at("data_offsets").get<std::vector<uint64_t>>();
    const int64_t n = shape_numel(shape);
    const size_t width = dtype == "F32" ? 4 : (dtype == "F16" || dtype == "BF16") ? 2 : 0;
    if (width == 0) throw DataError("unsupported safetensors dtype " + dtype + " for " + name);
    if (off.size() != 2 || off[1] > blob.size() || off[1] - off[0] != static_cast<uint64_t>(n) * width)
      throw DataError("bad data offsets for " + name);
    if (shape.empty()) shape = {1};
    Tensor t(shape);
    const char* src = blob.data() + off[0];
    for (int64_t i = 0; i < n; ++i) {
      if (width == 4) {
        std::memcpy(&t[i], src + 4 * i, 4);
      } else {
        uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        t[i] = dtype == "BF16" ? std::bit_cast<float>(static_cast<uint32_t>(h) << 16) : half_to_float(h);
      }
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors) {
  nlohmann::json meta = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const uint64_t bytes = static_cast<uint64_t>(t.numel()) * 4;
    meta[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header = meta.dump();
  while (header.size() % 8) header.push_back(' ');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(header.data(), static_cast<std::streamsize>(len));
  for (const auto& [name, t] : tensors) out.write(reinterpret_cast<const char*>(t.data()), t.numel() * 4);
}

VitBackbone::VitBackbone(const std::filesystem::path& weights, int64_t native_side)
    : VitBackbone(read_safetensors(weights), native_side) {}

VitBackbone::VitBackbone(std::map<std::string, Tensor> weights, int64_t native_side) : w_(std::move(weights)), side_(native_side) {
  const Tensor& pe = w("patch_embed.proj.weight");
  if (pe.rank() != 4 || pe.dim(1) != 3 || pe.dim(2) != pe.dim(3)) throw DataError("vit: bad patch_embed.proj.weight");
  dim_ = pe.dim(0);
  patch_ = pe.dim(2);
  if (side_ % patch_ != 0) throw ConfigError("backbone.native_side must be a multiple of the patch size");
  heads_ = std::max<int64_t>(dim_ / 64, 1);
  if (dim_ % heads_ != 0) throw DataError("vit: width not divisible by head count");
  while (w_.count("blocks." + std::to_string(depth_) + ".attn.qkv.weight")) ++depth_;
  const int64_t g = patch_grid();
  if (w("pos_embed").numel() != (1 + g * g) * dim_)
    throw DataError("vit: pos_embed does not match native side " + std::to_string(side_));
}

const Tensor& VitBackbone::w(const std::string& name) const {
  auto it = w_.find(name);
  if (it == w_.end()) throw DataError("vit: missing weight " + name);
  return it->second;
}

Tensor VitBackbone::encode(const Tensor& image) const {
  static constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
  static constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};
  Tensor x = image;
  const int64_t hw = side_ * side_;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < hw; ++i) x[c * hw + i] = (x[c * hw + i] - kMean[c]) / kStd[c];
  Tensor patches = kernels::conv2d_forward(x, w("patch_embed.proj.weight"), ConvGeom{static_cast<int>(patch_), 0});
  const int64_t g = patch_grid(), n = g * g, t = n + 1, d = dim_;
  Tensor seq(Shape{t, d});
  const Tensor& pos = w("pos_embed");
  const Tensor& pb = w("patch_embed.proj.bias");
  for (int64_t j = 0; j < d; ++j) seq[j] = w("cls_token")[j] + pos[j];
  for (int64_t p = 0; p < n; ++p)
    for (int64_t j = 0; j < d; ++j) seq[(p + 1) * d + j] = patches[j * n + p] + pb[j] + pos[(p + 1) * d + j];

  const int64_t hd = d / heads_;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  auto opt = [&](const std::string& k) { return w_.count(k) ? w_.at(k) : Tensor(); };
  for (int b = 0; b < depth_; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    Tensor h = layer_norm_rows(seq, w(p + "norm1.weight"), w(p + "norm1.bias"));
    Tensor qkv = linear_rows(h, w(p + "attn.qkv.weight"), opt(p + "attn.qkv.bias"));
    Tensor attn(Shape{t, d});
    Tensor q(Shape{t, hd}), k(Shape{t, hd}), v(Shape{hd, t}), s(Shape{t, t}), o(Shape{t, hd});
    for (int64_t head = 0; head < heads_; ++head) {
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < hd; ++j) {
          const int64_t base = i * 3 * d + head * hd + j;
          q[i * hd + j] = qkv[base] * scale;
          k[i * hd + j] = qkv[base + d];
          v[j * t + i] = qkv[base + 2 * d];
        }
      kernels::gemm_nt(t, t, hd, q.data(), k.data(), s.data());
      for (int64_t i = 0; i < t; ++i) {
        float* r = s.data() + i * t;
        float m = r[0];
        for (int64_t j = 1; j < t; ++j) m = std::max(m, r[j]);
        double z = 0.0;
        for (int64_t j = 0; j < t; ++j) z += (r[j] = std::exp(r[j] - m));
        for (int64_t j = 0; j < t; ++j) r[j] = static_cast<float>(r[j] / z);
      }
      kernels::gemm_nt(t, hd, t, s.data(), v.data(), o.data());
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < hd; ++j) attn[i * d + head * hd + j] = o[i * hd + j];
    }
    Tensor a = linear_rows(attn, w(p + "attn.proj.weight"), opt(p + "attn.proj.bias"));
    const Tensor ls1 = opt(p + "ls1.gamma"), ls2 = opt(p + "ls2.gamma");
    for (int64_t i = 0; i < t * d; ++i) seq[i] += ls1.defined() ? a[i] * ls1[i % d] : a[i];
    h = layer_norm_rows(seq, w(p + "norm2.weight"), w(p + "norm2.bias"));
    Tensor m = linear_rows(h, w(p + "mlp.fc1.weight"), opt(p + "mlp.fc1.bias"));
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = 0.5f * m[i] * (1.0f + std::erf(m[i] * 0.70710678f));
    m = linear_rows(m, w(p + "mlp.fc2.weight"), opt(p + "mlp.fc2.bias"));
    for (int64_t i = 0; i < t * d; ++i) seq[i] += ls2.defined() ? m[i] * ls2[i % d] : m[i];
  }
  return layer_norm_rows(seq, w("norm.weight"), w("norm.bias"));
}

Tensor VitBackbone::patch_tokens(const Tensor& images) const {
  require_rank(images, 4, "VitBackbone::patch_tokens");
  if (images.dim(1) != 3 || images.dim(2) != side_ || images.dim(3) != side_)
    throw std::invalid_argument("VitBackbone expects [B,3,native,native], got " + shape_str(images.shape()));
  const int64_t g = patch_grid(), n = g * g, d = dim_;
  Tensor out(Shape{images.dim(0), d, g, g});
  for (int64_t b = 0; b < images.dim(0); ++b) {
    const Tensor seq = encode(images.sample(b));
    for (int64_t p = 0; p < n; ++p)
      for (int64_t j = 0; j < d; ++j) out[(b * d + j) * n + p] = seq[(p + 1) * d + j];
  }
  return out;
}

Tensor VitBackbone::cls(const Tensor& images) const {
  require_rank(images, 4, "VitBackbone::cls");
  Tensor out(Shape{images.dim(0), dim_});
  for (int64_t b = 0; b < images.dim(0); ++b) {
    const Tensor seq = encode(images.sample(b));
    for (int64_t j = 0; j < dim_; ++j) out[b * dim_ + j] = seq[j];
  }
  return out;
}

}  // namespace vstain
