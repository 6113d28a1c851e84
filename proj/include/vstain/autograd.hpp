// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "vstain/tensor.hpp"

namespace vstain {

class Var;

/// One recorded operation. `inputs` are the operation's differentiable
/// arguments; `backward` maps the output gradient to one gradient per input
/// (an undefined Var means "no gradient").
struct Node {
  using BackwardFn = std::function<std::vector<Var>(const Var& grad_out)>;

  std::vector<Var> inputs;
  BackwardFn backward;
  const char* name = "";
  // True when `backward` is itself built from recorded ops, so the returned
  // gradients can be differentiated again (needed for R1).
  bool double_differentiable = false;
};

namespace detail {
struct VarImpl {
  Tensor value;
  Tensor grad;
  std::shared_ptr<Node> grad_fn;
  bool requires_grad = false;
};
}  // namespace detail

/// A tensor value plus its position in the recorded computation graph.
/// Copies share the same underlying node, like a handle.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Tensor& value() const { return impl_->value; }
  /// Mutable access for in-place parameter updates; only valid on leaves.
  Tensor& value_mut();
  const Shape& shape() const { return impl_->value.shape(); }
  int64_t dim(size_t i) const { return impl_->value.dim(i); }
  int64_t numel() const { return impl_->value.numel(); }
  float item() const { return impl_->value.item(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return !impl_->grad_fn; }
  const std::shared_ptr<Node>& grad_fn() const { return impl_->grad_fn; }

  /// Gradient accumulated by `backward()`. Undefined until the first backward.
  const Tensor& grad() const { return impl_->grad; }
  Tensor& grad_mut() { return impl_->grad; }
  void zero_grad();

  Var detach() const { return Var(impl_->value, false); }
  const detail::VarImpl* id() const { return impl_.get(); }

 private:
  friend Var record(Tensor, std::vector<Var>, const char*, bool, Node::BackwardFn);
  friend class BackwardEngine;
  std::shared_ptr<detail::VarImpl> impl_;
};

/// Whether new operations are recorded. Thread-local.
bool grad_enabled();

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Wraps an op result, attaching `backward` when recording is enabled and any
/// input requires a gradient.
Var record(Tensor value, std::vector<Var> inputs, const char* name, bool double_differentiable,
           Node::BackwardFn backward);

/// Reverse pass from a scalar; accumulates into `.grad()` of every leaf that
/// requires a gradient.
void backward(const Var& root);

/// Gradients of a scalar `root` with respect to `inputs` (zeros where
/// unreachable). With `create_graph`, the returned gradients are themselves
/// recorded and can be differentiated again.
std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, bool create_graph = false);

}  // namespace vstain
