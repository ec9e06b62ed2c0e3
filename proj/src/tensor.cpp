#include "veil/tensor.hpp"

#include <cmath>
#include <unordered_set>
#include <utility>

#include "veil/error.hpp"

namespace veil {

namespace {

thread_local int g_no_grad_depth = 0;

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor::Tensor(std::vector<int> shape, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  const std::size_t n = shape_product(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(n, 0.0);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  if (values.size() != t.size()) {
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for a tensor of size " +
                     std::to_string(t.size()));
  }
  t.impl_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError("value() requires a scalar tensor, got size " + std::to_string(size()));
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->requires_grad);
  t.impl_->data = impl_->data;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got size " + std::to_string(loss.size()));
  }
  detail::TensorImpl* root = loss.impl().get();
  if (!root->requires_grad) return;  // loss does not depend on any parameter

  // Iterative post-order walk over the requires_grad subgraph.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    detail::TensorImpl* node = stack.back().first;
    std::size_t& next = stack.back().second;
    if (next < node->parents.size()) {
      detail::TensorImpl* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-call scratch; only leaves accumulate across calls.
  for (detail::TensorImpl* node : order) {
    if (node->backprop) node->grad.assign(node->data.size(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

namespace detail {

Tensor make_node(std::vector<int> shape, std::initializer_list<Tensor> parents,
                 std::function<void(TensorImpl&)> backprop) {
  Tensor out(std::move(shape));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return out;
  TensorImpl* impl = out.impl().get();
  impl->requires_grad = true;
  impl->parents.reserve(parents.size());
  for (const Tensor& p : parents) impl->parents.push_back(p.impl());
  impl->backprop = std::move(backprop);
  return out;
}

}  // namespace detail

}  // namespace veil
