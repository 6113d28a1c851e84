// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "vstain/tensor.hpp"

namespace vstain {

/// Reads an 8-bit RGB(A) PNG into a [3,H,W] tensor in [0,1].
Tensor read_png(const std::filesystem::path& path);
/// Writes a [3,H,W] tensor in [0,1] (clamped, rounded) as 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Tensor& img);

/// [3,H,W] unit range <-> signed range.
Tensor to_signed(const Tensor& unit);
Tensor to_unit(const Tensor& signed_img);

/// Rounds through 8-bit quantization, as a write/read round trip would.
Tensor quantize8(const Tensor& img);

/// [3,H,W] crop with origin (y, x).
Tensor crop(const Tensor& img, int64_t y, int64_t x, int64_t h, int64_t w);
/// Writes `tile` into `canvas` at origin (y, x); both [3,*,*].
void paste(Tensor& canvas, const Tensor& tile, int64_t y, int64_t x);
Tensor flip_horizontal(const Tensor& img);
Tensor flip_vertical(const Tensor& img);

}  // namespace vstain
