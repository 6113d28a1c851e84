// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vstain/ops.hpp"

namespace vstain {

using Rng = std::mt19937_64;

enum class Init { kFanIn, kZero, kNormal };

/// Fills `t` in place. kFanIn draws U(-1/sqrt(fan_in), 1/sqrt(fan_in));
/// kNormal draws N(0, std).
void init_tensor(Tensor& t, Init init, int64_t fan_in, Rng& rng, double std = 0.02);

using NamedParams = std::vector<std::pair<std::string, Var>>;

/// Owner of trainable leaves and child modules. Parameter names are
/// dot-joined paths, e.g. "decoder.2.spade.gamma.weight".
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  NamedParams parameters() const;
  int64_t num_parameters() const;
  void set_requires_grad(bool flag);
  void zero_grad();
  /// Copies parameter values from a module with the same parameter names.
  void copy_values_from(const Module& other);

 protected:
  Var add_parameter(const std::string& name, Tensor value);
  void add_child(const std::string& name, Module& child);

 private:
  void collect(const std::string& prefix, NamedParams& out) const;

  NamedParams params_;
  std::vector<std::pair<std::string, Module*>> children_;
};

class Conv2d : public Module {
 public:
  Conv2d(int64_t in, int64_t out, int k, int stride, int pad, bool bias, Rng& rng, Init init = Init::kFanIn,
         double std = 0.02);
  Var forward(const Var& x) const;

  Var weight, bias;
  ConvGeom geom;
};

/// Weight layout [in, out, k, k].
class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(int64_t in, int64_t out, int k, int stride, int pad, bool bias, Rng& rng);
  Var forward(const Var& x) const;

  Var weight, bias;
  ConvGeom geom;
};

class Linear : public Module {
 public:
  Linear(int64_t in, int64_t out, bool bias, Rng& rng, Init init = Init::kFanIn);
  Var forward(const Var& x) const;

  Var weight, bias;
};

}  // namespace vstain
