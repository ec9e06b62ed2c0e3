#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace veil {

namespace detail {

// Node of the reverse-mode tape. Leaf tensors (parameters, inputs) have no
// parents; op results hold their inputs plus a closure that routes the
// node's grad into the parents' grads. Gradients accumulate across backward
// calls until explicitly zeroed.
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Scoped switch that disables tape recording; used for evaluation and for
// feature caching against a frozen base. Thread-local, so independent folds
// may run in parallel.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// N-dimensional array of 64-bit reals, row-major, with an optional gradient
// buffer. Copying a Tensor copies the handle; clone() copies storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);

  static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return impl_->data.size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  // Scalar read; throws ShapeError if size() != 1.
  double value() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return !impl_->grad.empty(); }
  double* grad_data() {
    impl_->ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // Deep copy of data (not grad, not tape history).
  Tensor clone() const;

  bool all_finite() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Populates grad buffers of every requires_grad ancestor of `loss`.
// Gradients accumulate; callers zero them between steps.
void backward(const Tensor& loss);

namespace detail {

// Builds an op node: allocates the output, and when grad mode is on and any
// parent requires grad, records parents + backprop closure on the tape.
Tensor make_node(std::vector<int> shape, std::initializer_list<Tensor> parents,
                 std::function<void(TensorImpl&)> backprop);

}  // namespace detail

}  // namespace veil
