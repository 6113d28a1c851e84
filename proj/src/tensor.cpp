// SPDX-License-Identifier: Apache-2.0
#include "vstain/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace vstain {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                                shape_str(shape_));
}

float Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::sample(int64_t n) const {
  if (rank() == 0 || n < 0 || n >= shape_[0]) throw std::out_of_range("sample index out of range");
  Shape s = shape_;
  s[0] = 1;
  const int64_t stride = numel() / shape_[0];
  std::vector<float> out(data_.begin() + n * stride, data_.begin() + (n + 1) * stride);
  return Tensor(std::move(s), std::move(out));
}

Tensor Tensor::stack_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_batch of zero tensors");
  const Shape& first = parts.front().shape();
  Shape out_shape;
  const auto total = static_cast<int64_t>(parts.size());
  const bool concat = first.size() > 1 && first[0] == 1;
  for (const auto& p : parts)
    if (p.shape() != first) throw std::invalid_argument("stack_batch shape mismatch");
  if (concat) {
    out_shape = first;
    out_shape[0] = total;
  } else {
    out_shape.push_back(total);
    out_shape.insert(out_shape.end(), first.begin(), first.end());
  }
  std::vector<float> data;
  data.reserve(static_cast<size_t>(shape_numel(out_shape)));
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  return Tensor(std::move(out_shape), std::move(data));
}

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                                shape_str(t.shape()));
}

void require_rank(const Tensor& t, size_t rank, const char* what) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(t.shape()));
}

}  // namespace vstain
