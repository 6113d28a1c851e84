// SPDX-License-Identifier: Apache-2.0
// OpenMP kernels against the serial reference implementations.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "vstain/kernels.hpp"

using namespace vstain;

namespace {

Tensor random_tensor(const Shape& s, uint64_t seed) {
  Tensor t(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.span()) v = u(rng);
  return t;
}

std::vector<float> random_vector(int64_t n, uint64_t seed) {
  std::vector<float> v(static_cast<size_t>(n));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const int64_t n = state.range(0);
  const auto a = random_vector(n * n, 1), b = random_vector(n * n, 2);
  std::vector<float> c(static_cast<size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    else
      reference::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

// Args: channels, spatial side; batch 2, 3x3 kernel, stride 1, pad 1.
template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const int64_t c = state.range(0), s = state.range(1);
  const Tensor x = random_tensor(Shape{2, c, s, s}, 3), w = random_tensor(Shape{c, c, 3, 3}, 4);
  const ConvGeom g{1, 1};
  for (auto _ : state) {
    Tensor y = Parallel ? kernels::conv2d_forward(x, w, g) : reference::conv2d_forward(x, w, g);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * 2 * c * c * 9 * s * s);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  const int64_t c = state.range(0), s = state.range(1);
  const Tensor x = random_tensor(Shape{2, c, s, s}, 5), w = random_tensor(Shape{c, c, 3, 3}, 6);
  const Tensor gy = random_tensor(Shape{2, c, s, s}, 7);
  const ConvGeom g{1, 1};
  for (auto _ : state) {
    Tensor gx = Parallel ? kernels::conv2d_input_grad(gy, w, x.shape(), g) : reference::conv2d_input_grad(gy, w, x.shape(), g);
    Tensor gw = Parallel ? kernels::conv2d_weight_grad(x, gy, w.shape(), g) : reference::conv2d_weight_grad(x, gy, w.shape(), g);
    benchmark::DoNotOptimize(gx.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void BM_GroupNorm(benchmark::State& state) {
  const int64_t c = state.range(0), s = state.range(1);
  const Tensor x = random_tensor(Shape{2, c, s, s}, 8);
  for (auto _ : state) {
    Tensor y = Parallel ? kernels::group_norm_forward(x, 8, 1e-5f, nullptr) : reference::group_norm_forward(x, 8, 1e-5f);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/openmp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/openmp")->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/openmp")->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference")->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_GroupNorm<true>)->Name("group_norm/openmp")->Args({64, 64});
BENCHMARK(BM_GroupNorm<false>)->Name("group_norm/reference")->Args({64, 64});

BENCHMARK_MAIN();
