// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "vstain/autograd.hpp"
#include "vstain/kernels.hpp"

/// Differentiable operations on Vars. Ops marked (dd) have backward passes
/// built from recorded ops and support a second differentiation.
namespace vstain {

// Elementwise, same-shape.
Var add(const Var& a, const Var& b);  // (dd)
Var sub(const Var& a, const Var& b);  // (dd)
Var mul(const Var& a, const Var& b);  // (dd)
Var scale(const Var& a, float s);     // (dd)
Var add_scalar(const Var& a, float s);  // (dd)
Var mul_const(const Var& a, const Tensor& m);  // (dd)
Var square(const Var& a);  // (dd)
Var abs(const Var& a);     // (dd)
Var relu(const Var& a);    // (dd)
Var leaky_relu(const Var& a, float slope);  // (dd)
Var tanh(const Var& a);
Var clamp_min(const Var& a, float lo);  // (dd)
Var log10(const Var& a);

// Reductions.
Var sum(const Var& a);   // (dd) -> [1]
Var mean(const Var& a);  // (dd) -> [1]
Var expand_scalar(const Var& s, const Shape& shape);  // (dd)
/// Mean of the ceil(fraction * M) largest entries of each sample; [N,...] -> [N].
Var topk_mean_per_sample(const Var& x, double fraction);

// Channel broadcasting on [N,C,...].
Var add_channel_bias(const Var& x, const Var& bias);  // (dd) bias: [C]
Var sum_to_channel(const Var& x);                     // (dd) -> [C]
Var broadcast_channel(const Var& c, const Shape& shape);  // (dd)
/// x * gamma + beta with gamma, beta: [N,C] broadcast over space.
Var film(const Var& x, const Var& gamma, const Var& beta);
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& x, int64_t begin, int64_t end);

// Convolution. Weight layout [Co,Ci,kh,kw].
Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvGeom& g);  // (dd), bias may be undefined
Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, const ConvGeom& g);  // (dd)
Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, const ConvGeom& g);  // (dd)
/// Transposed convolution; weight layout [Ci,Co,kh,kw].
Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, const ConvGeom& g);

// Spatial resampling.
Var avg_pool2d(const Var& x, int k);  // (dd) k x k windows, stride k
Var upsample_nearest2d(const Var& x, int k, float gain = 1.0f);  // (dd)
Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w);
Var pad_replicate(const Var& x, int p);

// Normalization (no affine terms).
Var group_norm(const Var& x, int64_t groups, float eps = 1e-5f);
Var instance_norm(const Var& x, float eps = 1e-5f);
/// Unit L2 norm across channels at every pixel.
Var channel_normalize(const Var& x, float eps = 1e-10f);

// Dense algebra.
Var reshape(const Var& x, const Shape& shape);  // (dd)
Var linear(const Var& x, const Var& w, const Var& bias);  // x: [N,in], w: [out,in]
/// Batched matmul on [B,M,K] x [B,K,N] with optional transposes of either side.
Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b);
Var softmax_lastdim(const Var& x);
Var embedding(const Var& table, const std::vector<int>& indices);

// Tensor-level helpers (not recorded).
Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor avg_pool2d(const Tensor& x, int k);
Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w);
/// Keys-style bicubic (a = -0.75) resize with clamped borders.
Tensor resize_bicubic(const Tensor& x, int64_t out_h, int64_t out_w);

}  // namespace vstain
