#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

// Reverse-mode autodiff over Tensor<T>. Each op returns a heap node holding
// its output value, links to its inputs, and a closure that maps the node's
// output gradient onto input gradients. backward() walks the graph once in
// reverse topological order.
//
// Gradient lifetime contract: interior gradients are reset at the start of
// every backward() call, parameter gradients accumulate across calls (two
// passes double them) until zero_grad() is invoked explicitly.

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until backward touches this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;  // set only when requires_grad
  std::string op;
  bool is_param = false;
  bool requires_grad = false;

  bool has_grad() const { return grad.numel() == value.numel() && grad.numel() > 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Tensor<T>(value.shape());
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

// Evaluation guard: while alive, newly built ops produce constant nodes with
// no parents or closures, so inference never retains a graph.
namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
Var<T> make_constant(Tensor<T> value, std::string op = "const") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  return n;
}

template <class T>
Var<T> make_param(Tensor<T> value, std::string op = "param") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  n->is_param = true;
  n->requires_grad = true;
  return n;
}

namespace detail {

template <class T>
bool any_requires_grad(const std::vector<Var<T>>& parents) {
  for (const auto& p : parents)
    if (p && p->requires_grad) return true;
  return false;
}

// Postorder over the parent DAG, iterative so deep residual chains cannot
// overflow the stack. Nodes that require no gradient are not expanded.
template <class T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and propagates. The loss must be scalar; there is
// no vector-jacobian entry point because nothing in the trainer needs one.
template <class T>
void backward(const Var<T>& loss) {
  if (!loss) throw ShapeError("backward: null node");
  if (loss->value.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss->value.shape()));
  if (!loss->requires_grad) return;  // graph was built under NoGradGuard

  auto order = detail::topo_order(loss.get());
  for (Node<T>* n : order) {
    if (n->is_param) {
      n->ensure_grad();  // accumulates across backward() calls
    } else {
      if (n->has_grad())
        n->grad.fill(T(0));
      else
        n->grad = Tensor<T>(n->value.shape());
    }
  }
  loss->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

template <class T>
void zero_grad(const std::vector<Var<T>>& params) {
  for (const auto& p : params)
    if (p && p->has_grad()) p->grad.fill(T(0));
}

}  // namespace p3d
