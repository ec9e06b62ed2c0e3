#pragma once

#include <functional>

#include "veil/tensor.hpp"

namespace veil {

// Valid (no padding) 3x3 cross-correlation with stride 1.
//   input  [C_in, H, W], kernel [C_out, C_in, 3, 3], bias [C_out]
//   -> [C_out, H-2, W-2]
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

// weight[M,N] . input[N] + bias[M] -> [M]
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Elementwise max(0, v); subgradient at 0 is 0.
Tensor relu(const Tensor& input);

// 2x2 max pooling, stride 2. Requires even H and W; backward routes the
// gradient to the first-encountered maximum in row-major window order.
Tensor max_pool2d(const Tensor& input);

// Keeps the top-left [C, new_h, new_w] region; used to even out odd spatial
// dims before pooling.
Tensor crop_spatial(const Tensor& input, int new_h, int new_w);

// [C,H,W] -> [C*H*W]
Tensor flatten(const Tensor& input);

// Numerically stabilized softmax over a vector of K >= 2 logits.
Tensor softmax(const Tensor& logits);

// -log(p_label) with p clamped to >= 1e-12 so adversarially crushed
// probabilities cannot produce an infinite loss.
Tensor cross_entropy(const Tensor& probabilities, int label);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& input, double factor);
Tensor sum(const Tensor& input);

inline constexpr double kCrossEntropyClamp = 1e-12;

// Central-difference gradient estimate of a scalar-valued function. The
// tensor is perturbed in place and restored; evaluation runs untaped.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor& x,
                                  double eps = 1e-5);

}  // namespace veil
