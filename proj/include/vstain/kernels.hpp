// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "vstain/tensor.hpp"

namespace vstain {

struct ConvGeom {
  int stride = 1;
  int pad = 0;
};

/// Output spatial size of a zero-padded convolution.
int64_t conv_out_size(int64_t in, int64_t kernel, const ConvGeom& g);

/// OpenMP-parallel kernels. Every kernel partitions work over independent
/// outputs, so results are bitwise identical for any thread count.
namespace kernels {

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major.
void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c, bool accumulate);
/// C[M,N] = A[M,K] * B[N,K]^T, all row-major.
void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);

/// x: [N,Ci,H,W], w: [Co,Ci,kh,kw] -> [N,Co,Ho,Wo].
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeom& g);
/// Adjoint of conv2d_forward in x. Also serves as transposed convolution.
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvGeom& g);
/// Adjoint of conv2d_forward in w.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, const ConvGeom& g);

struct NormStats {
  std::vector<float> mean;  // [N*groups]
  std::vector<float> rstd;  // [N*groups]
};

/// Normalizes each (sample, channel group) slice to zero mean, unit variance.
/// groups == C gives instance normalization.
Tensor group_norm_forward(const Tensor& x, int64_t groups, float eps, NormStats* stats);
Tensor group_norm_backward(const Tensor& gy, const Tensor& y, const NormStats& stats, int64_t groups);

}  // namespace kernels

/// Serial, loop-for-loop reference implementations. Kept for testing and
/// benchmarking against the parallel kernels; never used on the hot path.
namespace reference {

void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c, bool accumulate);
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeom& g);
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, const ConvGeom& g);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, const ConvGeom& g);
Tensor group_norm_forward(const Tensor& x, int64_t groups, float eps);

}  // namespace reference

}  // namespace vstain
