// SPDX-License-Identifier: Apache-2.0
#include "sevnet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace sevnet {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::span<double> detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = sevnet::numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape.empty() || shape.size() > 5)
    throw std::invalid_argument("tensor rank must be 1..5, got " +
                                std::to_string(shape.size()));
  for (auto e : shape)
    if (e < 1)
      throw std::invalid_argument("tensor extents must be positive: " +
                                  to_string(shape));
  if (sevnet::numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + to_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const auto& s = node_->shape;
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::out_of_range("axis out of range for shape " + to_string(s));
  return s[axis];
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(node_->data.size());
}

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (node_->data.size() != 1)
    throw std::invalid_argument("item() on non-scalar tensor " +
                                to_string(node_->shape));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return from_data(node_->shape, node_->data, false);
}

Tensor Tensor::reshape(Shape shape) const {
  if (sevnet::numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + to_string(node_->shape) +
                                " to " + to_string(shape));
  auto src = node_;
  return detail::make_result(
      std::move(shape), node_->data, "reshape", {*this},
      [src](detail::Node& self) {
        auto g = src->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor detail::make_result(Shape shape, std::vector<double> data,
                           std::string op, std::vector<Tensor> inputs,
                           std::function<void(Node& self)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) {
                                   return t.defined() && t.requires_grad();
                                 });
    if (any) {
      node->requires_grad = true;
      for (auto& t : inputs)
        if (t.defined() && t.requires_grad()) node->parents.push_back(t.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

namespace {

void run_backward(const Tensor& root, std::span<const double> seed) {
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order)
    if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
  auto g = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf()) continue;
    node->backward_fn(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw std::invalid_argument(
        "backward() requires a scalar root, got shape " +
        (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  const double one = 1.0;
  run_backward(root, {&one, 1});
}

void backward(const Tensor& root, std::span<const double> seed) {
  if (!root.defined() || static_cast<std::size_t>(root.numel()) != seed.size())
    throw std::invalid_argument("backward(): seed gradient size does not match the root");
  run_backward(root, seed);
}

}  // namespace sevnet
