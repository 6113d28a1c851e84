// SPDX-License-Identifier: Apache-2.0
#include "vstain/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace vstain {

void init_tensor(Tensor& t, Init init, int64_t fan_in, Rng& rng, double std) {
  switch (init) {
    case Init::kZero:
      t.fill(0.0f);
      return;
    case Init::kNormal: {
      std::normal_distribution<double> dist(0.0, std);
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(dist(rng));
      return;
    }
    case Init::kFanIn: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(dist(rng));
      return;
    }
  }
}

NamedParams Module::parameters() const {
  NamedParams out;
  collect("", out);
  return out;
}

void Module::collect(const std::string& prefix, NamedParams& out) const {
  for (const auto& [name, v] : params_) out.emplace_back(prefix + name, v);
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

int64_t Module::num_parameters() const {
  int64_t n = 0;
  for (const auto& [name, v] : parameters()) n += v.numel();
  return n;
}

void Module::set_requires_grad(bool flag) {
  for (auto& [name, v] : parameters()) v.set_requires_grad(flag);
}

void Module::zero_grad() {
  for (auto& [name, v] : parameters()) v.zero_grad();
}

void Module::copy_values_from(const Module& other) {
  std::unordered_map<std::string, Var> src;
  for (const auto& [name, v] : other.parameters()) src.emplace(name, v);
  for (auto& [name, v] : parameters()) {
    auto it = src.find(name);
    if (it == src.end()) throw std::invalid_argument("copy_values_from: missing parameter " + name);
    if (it->second.shape() != v.shape()) throw std::invalid_argument("copy_values_from: shape mismatch for " + name);
    v.value_mut() = it->second.value();
  }
}

Var Module::add_parameter(const std::string& name, Tensor value) {
  Var v(std::move(value), true);
  params_.emplace_back(name, v);
  return v;
}

void Module::add_child(const std::string& name, Module& child) { children_.emplace_back(name, &child); }

Conv2d::Conv2d(int64_t in, int64_t out, int k, int stride, int pad, bool with_bias, Rng& rng, Init init, double std)
    : geom{stride, pad} {
  Tensor w(Shape{out, in, k, k});
  init_tensor(w, init, in * k * k, rng, std);
  weight = add_parameter("weight", std::move(w));
  if (with_bias) {
    Tensor b(Shape{out});
    init_tensor(b, init == Init::kFanIn ? Init::kFanIn : Init::kZero, in * k * k, rng);
    bias = add_parameter("bias", std::move(b));
  }
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, weight, bias, geom); }

ConvTranspose2d::ConvTranspose2d(int64_t in, int64_t out, int k, int stride, int pad, bool with_bias, Rng& rng)
    : geom{stride, pad} {
  Tensor w(Shape{in, out, k, k});
  init_tensor(w, Init::kFanIn, out * k * k, rng);
  weight = add_parameter("weight", std::move(w));
  if (with_bias) {
    Tensor b(Shape{out});
    init_tensor(b, Init::kFanIn, out * k * k, rng);
    bias = add_parameter("bias", std::move(b));
  }
}

Var ConvTranspose2d::forward(const Var& x) const { return conv_transpose2d(x, weight, bias, geom); }

Linear::Linear(int64_t in, int64_t out, bool with_bias, Rng& rng, Init init) {
  Tensor w(Shape{out, in});
  init_tensor(w, init, in, rng);
  weight = add_parameter("weight", std::move(w));
  if (with_bias) {
    Tensor b(Shape{out});
    init_tensor(b, init, in, rng);
    bias = add_parameter("bias", std::move(b));
  }
}

Var Linear::forward(const Var& x) const { return linear(x, weight, bias); }

}  // namespace vstain
