// SPDX-License-Identifier: Apache-2.0
#include "vstain/autograd.hpp"

#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "vstain/ops.hpp"

namespace vstain {

namespace {
thread_local bool g_grad_enabled = true;
}

Var::Var(Tensor value, bool requires_grad) : impl_(std::make_shared<detail::VarImpl>()) {
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

Tensor& Var::value_mut() {
  if (!is_leaf()) throw std::logic_error("value_mut() on a non-leaf Var");
  return impl_->value;
}

void Var::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad() on a non-leaf Var");
  impl_->requires_grad = flag;
}

void Var::zero_grad() {
  if (impl_->grad.defined()) impl_->grad.fill(0.0f);
}

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Var record(Tensor value, std::vector<Var> inputs, const char* name, bool double_differentiable,
           Node::BackwardFn backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->name = name;
  node->double_differentiable = double_differentiable;
  out.impl_->grad_fn = std::move(node);
  out.impl_->requires_grad = true;
  return out;
}

class BackwardEngine {
 public:
  using Impl = detail::VarImpl;
  struct LeafGrad {
    Var leaf;
    Var grad;
  };

  static std::vector<LeafGrad> run(const Var& root, bool create_graph) {
    if (!root.defined() || root.numel() != 1) throw std::invalid_argument("backward root must be a scalar");
    std::vector<LeafGrad> result;
    if (!root.requires_grad()) return result;

    // Post-order DFS; reversing it gives an order where every consumer is
    // processed before its producers.
    std::vector<Var> order;
    std::unordered_set<const Impl*> visited;
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.id());
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      const auto& fn = v.grad_fn();
      if (fn && next < fn->inputs.size()) {
        Var in = fn->inputs[next++];
        if (in.defined() && in.requires_grad() && visited.insert(in.id()).second) stack.emplace_back(in, 0);
        continue;
      }
      order.push_back(v);
      stack.pop_back();
    }

    std::unordered_map<const Impl*, Var> grads;
    GradModeGuard mode(create_graph);
    grads[root.id()] = Var(Tensor(root.shape(), 1.0f));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Var& v = *it;
      auto found = grads.find(v.id());
      if (found == grads.end()) continue;
      const auto& fn = v.grad_fn();
      if (!fn) {
        result.push_back({v, found->second});
        continue;
      }
      if (create_graph && !fn->double_differentiable)
        throw std::logic_error(std::string("double backward not supported through op '") + fn->name + "'");
      std::vector<Var> in_grads = fn->backward(found->second);
      grads.erase(found);
      for (size_t i = 0; i < fn->inputs.size(); ++i) {
        const Var& in = fn->inputs[i];
        if (i >= in_grads.size() || !in_grads[i].defined() || !in.requires_grad()) continue;
        if (in_grads[i].shape() != in.shape())
          throw std::logic_error(std::string("op '") + fn->name + "' produced gradient of shape " +
                                 shape_str(in_grads[i].shape()) + " for input of shape " + shape_str(in.shape()));
        auto slot = grads.find(in.id());
        if (slot == grads.end())
          grads.emplace(in.id(), in_grads[i]);
        else
          slot->second = add(slot->second, in_grads[i]);
      }
    }
    return result;
  }

  static void accumulate(const Var& root) {
    for (auto& [leaf, g] : run(root, false)) {
      Tensor& dst = leaf.impl_->grad;
      if (!dst.defined()) {
        dst = g.value();
        continue;
      }
      float* d = dst.data();
      const float* s = g.value().data();
      for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
    }
  }
};

void backward(const Var& root) { BackwardEngine::accumulate(root); }

std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, bool create_graph) {
  const auto grads = BackwardEngine::run(root, create_graph);
  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    Var g;
    for (const auto& lg : grads)
      if (lg.leaf.id() == in.id()) g = lg.grad;
    out.push_back(g.defined() ? g : Var(Tensor(in.shape(), 0.0f)));
  }
  return out;
}

}  // namespace vstain
