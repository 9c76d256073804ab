#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "switchhead/errors.hpp"

namespace switchhead {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set on the root once backward has run
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Row-major float64 n-d array with an optional gradient slot. Copies share the
// underlying node (handle semantics, like a framework tensor).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->value.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  // Creation from external data: sizes must agree and every value be finite.
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw ContractError("Tensor::from: non-finite value rejected");
    }
    return adopt(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  // Internal construction without validation (op results).
  static Tensor adopt(Shape shape, std::vector<double> values, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  // 2-D view helpers: leading dimension x product of the rest.
  std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  const double* data() const { return node_->value.data(); }

  double item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not a scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void clear_grad() { node_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const { return adopt(shape(), node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result. `bw(out)` must read out.grad and accumulate into the
// parents' grads; it is only installed when some input requires a gradient
// and recording is enabled.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   Backward&& bw) {
  Tensor out = Tensor::adopt(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& t : inputs) {
    if (t.defined()) n.parents.push_back(t.node());
  }
  n.backward_fn = std::forward<Backward>(bw);
  return out;
}

// Accumulates g into p's gradient when p participates in differentiation.
inline void accumulate(Node* p, std::span<const double> g) {
  if (!p->requires_grad) return;
  auto& pg = p->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. The graph is released afterwards, so
// a second call on the same loss is rejected; leaf gradients accumulate.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto* root = loss.node().get();
  if (root->consumed) throw ContractError("backward: graph already consumed; re-run forward first");
  if (!root->requires_grad) throw ContractError("backward: loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (detail::Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  root->consumed = true;
}

}  // namespace switchhead
