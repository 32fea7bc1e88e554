#pragma once

// Minimal reverse-mode autograd tensor. Values are computed eagerly; when
// grad mode is on and any parent requires grad, a backward closure is stored
// and backward() runs the tape in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "fsda/core/errors.hpp"

namespace fsda {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  int64_t numel() const { return static_cast<int64_t>(val.size()); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> vals, bool requires_grad = false) {
    check_arg(shape_numel(shape) == static_cast<int64_t>(vals.size()), "Tensor::from: size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(vals);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[i]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }

  T* data() { return n_->val.data(); }
  const T* data() const { return n_->val.data(); }
  std::vector<T>& vals() { return n_->val; }
  const std::vector<T>& vals() const { return n_->val; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return !n_->grad.empty(); }
  T* grad_data() {
    n_->ensure_grad();
    return n_->grad.data();
  }
  const std::vector<T>& grad() const { return n_->grad; }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    check_arg(numel() == 1, "item(): tensor is not scalar");
    return n_->val[0];
  }

  /// Value copy detached from the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->val = n_->val;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node() const { return n_; }

  /// Reverse-mode pass from this scalar.
  void backward() {
    check_arg(numel() == 1, "backward(): root must be scalar");
    std::vector<Node*> order;
    topo_collect(order);
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward && !node->grad.empty()) node->backward(*node);
    }
  }

 private:
  void topo_collect(std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    // iterative post-order
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> n_;
};

namespace detail {

template <class T>
std::shared_ptr<TensorNode<T>> new_node(Shape shape) {
  auto n = std::make_shared<TensorNode<T>>();
  n->val.resize(shape_numel(shape));
  n->shape = std::move(shape);
  return n;
}

/// Wire parents + backward closure if grad mode is on and any parent needs it.
template <class T>
void attach(const std::shared_ptr<TensorNode<T>>& n, std::vector<std::shared_ptr<TensorNode<T>>> parents,
            std::function<void(TensorNode<T>&)> bw) {
  if (!g_grad_enabled) return;
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  if (!rg) return;
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward = std::move(bw);
}

}  // namespace detail

}  // namespace fsda
