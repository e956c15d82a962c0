#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "sitspan/tensor.hpp"

namespace sitspan::ag {

// Define-by-run reverse-mode autodiff over Tensor<T>. Each op builds a Node
// whose backward closure scatters the output gradient into its parents.
// Closures and non-leaf gradients are released as soon as they have run so
// peak memory stays near the forward activations.

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  bool leaf = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;
  const char* op = "";

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->leaf = true;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& val() const { return n_->value; }
  Tensor<T>& val() { return n_->value; }
  Tensor<T>& grad() { return n_->ensure_grad(), n_->grad; }
  const Tensor<T>& grad() const { return n_->grad; }
  bool has_grad() const { return n_ && n_->grad.defined(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  void zero_grad() {
    if (n_) n_->grad = Tensor<T>{};
  }

  // Reverse pass from this scalar. Gradients accumulate into leaves.
  void backward() const {
    check(n_ != nullptr, ErrorCode::Internal, "backward on empty var");
    check(n_->value.numel() == 1, ErrorCode::Internal,
          "backward requires a scalar loss");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward) {
        if (!node->grad.defined()) node->ensure_grad();
        node->backward(*node);
        node->backward = nullptr;  // release saved activations
      }
      if (!node->leaf) node->grad = Tensor<T>{};
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Builds a node from parents; `backward` may be empty for non-differentiable
// results. requires_grad propagates from the parents.
template <typename T>
Var<T> make_op(const char* op, Tensor<T> value,
               std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (auto& p : parents) {
    if (p.defined()) {
      rg = rg || p.requires_grad();
      n->parents.push_back(p.node());
    }
  }
  n->requires_grad = rg;
  if (rg) n->backward = std::move(backward);
  return Var<T>(std::move(n));
}

using VarF = Var<float>;
using VarD = Var<double>;

}  // namespace sitspan::ag
