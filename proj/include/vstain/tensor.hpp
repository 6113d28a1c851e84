// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vstain {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// Dense, contiguous, row-major float32 array. Images are NCHW.
///
/// Copies are deep; a Tensor never aliases another Tensor's storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 4-D accessors; caller guarantees rank 4.
  float& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  float item() const;
  Tensor reshaped(Shape shape) const;
  void fill(float v);

  /// Copy of sample `n` along the leading axis, keeping a leading axis of 1.
  Tensor sample(int64_t n) const;
  /// Stack equally shaped tensors along a new leading axis (or concatenate along
  /// axis 0 when every part already has a leading axis of 1).
  static Tensor stack_batch(const std::vector<Tensor>& parts);

  bool all_finite() const;
  bool bitwise_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);
void require_rank(const Tensor& t, size_t rank, const char* what);

}  // namespace vstain
