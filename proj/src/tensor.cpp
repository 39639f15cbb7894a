#include "crossmodal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "crossmodal/errors.hpp"

namespace crossmodal {

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  Tensor::BackwardFn backward;
};

}  // namespace detail

namespace {
thread_local bool tl_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) {
  tl_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::vector<float> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data,
                         bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_string(shape));
    }
  }
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<float> data,
                       std::vector<Tensor> parents, BackwardFn backward) {
  Tensor out = from_data(std::move(shape), std::move(data), false);
  if (!tl_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  auto& node = *out.node_;
  node.requires_grad = true;
  node.backward = std::move(backward);
  node.parents.reserve(parents.size());
  for (auto& p : parents) {
    if (p.defined()) node.parents.push_back(p.node_);
  }
  return out;
}

detail::TensorNode& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }
std::size_t Tensor::numel() const { return node().data.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::cols() const { return shape().back(); }
std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<const float> Tensor::data() const { return node().data; }
std::span<float> Tensor::mutable_data() { return node().data; }

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on non-scalar tensor " +
                        shape_string(shape()));
  }
  return data()[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }
bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const float> Tensor::grad() const { return node().grad; }

std::span<float> Tensor::mutable_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  auto& n = node();
  n.grad.clear();
  n.grad.shrink_to_fit();
}

void Tensor::accumulate_grad(std::span<const float> g) const {
  auto& n = node();
  if (!n.requires_grad) return;
  if (g.size() != n.data.size()) {
    throw DimensionError("gradient length " + std::to_string(g.size()) +
                         " does not match tensor " + shape_string(n.shape));
  }
  if (n.grad.empty()) {
    n.grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

bool Tensor::is_finite() const {
  return std::all_of(data().begin(), data().end(),
                     [](float v) { return std::isfinite(v); });
}

Tensor Tensor::clone() const {
  return from_data(shape(), node().data, requires_grad());
}

Tensor Tensor::detach() const { return from_data(shape(), node().data, false); }

void Tensor::backward() const {
  auto& root = node();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        shape_string(root.shape));
  }
  if (!root.requires_grad) {
    throw ContractError("backward() on a tensor that is not on the tape");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::TensorNode* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (root.grad.empty()) root.grad.assign(1, 0.0f);
  root.grad[0] += 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* n = *it;
    if (!n->backward) continue;
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0f);
    n->backward(n->grad);
  }

  // Release the tape: interior nodes drop their closures, edges and grads.
  for (detail::TensorNode* n : order) {
    if (!n->backward) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->requires_grad = false;
  }
}

}  // namespace crossmodal
