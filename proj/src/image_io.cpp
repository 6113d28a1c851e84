// SPDX-License-Identifier: Apache-2.0
#include "vstain/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "vstain/errors.hpp"

namespace vstain {

Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const int64_t h = image.height, w = image.width;
  Tensor out(Shape{3, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = static_cast<float>(buf[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& img) {
  require_rank(img, 3, "write_png");
  if (img.dim(0) != 3) throw std::invalid_argument("write_png expects 3 channels");
  const int64_t h = img.dim(1), w = img.dim(2);
  std::vector<png_byte> buf(static_cast<size_t>(h * w * 3));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img[(c * h + y) * w + x], 0.0f, 1.0f);
        buf[static_cast<size_t>((y * w + x) * 3 + c)] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path.string() + ": " + image.message);
}

Tensor to_signed(const Tensor& unit) {
  Tensor out = unit;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] * 2.0f - 1.0f;
  return out;
}

Tensor to_unit(const Tensor& signed_img) {
  Tensor out = signed_img;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp((out[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
  return out;
}

Tensor quantize8(const Tensor& img) {
  Tensor out = img;
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>(std::lround(std::clamp(out[i], 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return out;
}

Tensor crop(const Tensor& img, int64_t y, int64_t x, int64_t h, int64_t w) {
  require_rank(img, 3, "crop");
  const int64_t c = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  if (y < 0 || x < 0 || y + h > ih || x + w > iw)
    throw std::out_of_range("crop window exceeds image " + shape_str(img.shape()));
  Tensor out(Shape{c, h, w});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t r = 0; r < h; ++r)
      std::memcpy(out.data() + (ch * h + r) * w, img.data() + (ch * ih + y + r) * iw + x, sizeof(float) * static_cast<size_t>(w));
  return out;
}

void paste(Tensor& canvas, const Tensor& tile, int64_t y, int64_t x) {
  const int64_t c = tile.dim(0), h = tile.dim(1), w = tile.dim(2), ch_ = canvas.dim(1), cw = canvas.dim(2);
  if (canvas.dim(0) != c || y < 0 || x < 0 || y + h > ch_ || x + w > cw)
    throw std::out_of_range("paste window exceeds canvas " + shape_str(canvas.shape()));
  for (int64_t k = 0; k < c; ++k)
    for (int64_t r = 0; r < h; ++r)
      std::memcpy(canvas.data() + (k * ch_ + y + r) * cw + x, tile.data() + (k * h + r) * w, sizeof(float) * static_cast<size_t>(w));
}

Tensor flip_horizontal(const Tensor& img) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int64_t k = 0; k < c; ++k)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = img[(k * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor flip_vertical(const Tensor& img) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int64_t k = 0; k < c; ++k)
    for (int64_t y = 0; y < h; ++y)
      std::memcpy(out.data() + (k * h + y) * w, img.data() + (k * h + (h - 1 - y)) * w, sizeof(float) * static_cast<size_t>(w));
  return out;
}

}  // namespace vstain
