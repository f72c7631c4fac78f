#pragma once

#include <cstddef>
#include <vector>

#include "refseg/tensor.hpp"

// Differentiable tensor operations. Every op records its backward closure
// when any input requires a gradient and recording is enabled. Axis
// arguments accept negative values counted from the last axis.
namespace refseg {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormalizeEps = 1e-8;

/// Matrix product over the last two axes.
///   [.., m, k] x [k, n]       -> [.., m, n]   (b shared across leading axes)
///   [B.., m, k] x [B.., k, n] -> [B.., m, n]  (batched, identical leading axes)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x . weight (+ bias) over the last axis; weight is [in, out], bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);

// Elementwise with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> neg(const Tensor<T>& a);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
/// Natural log; nonpositive entries raise DomainError.
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
/// Elementwise clamp; gradient passes only where lo < a < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = false);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);

/// exp(x - max) / sum(exp(x - max)) along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis);

/// Per-row normalisation over the last axis, then gain * x_hat + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(kLayerNormEps));

/// Divides each slice along `axis` by (slice sum + eps). Entries must be >= 0.
template <typename T>
Tensor<T> l1_normalize(const Tensor<T>& a, int axis, T eps = static_cast<T>(kNormalizeEps));

/// l1 normalisation of the columns of a [.., N, K] map, i.e. over axis -2.
template <typename T>
Tensor<T> l1_normalize_columns(const Tensor<T>& a, T eps = static_cast<T>(kNormalizeEps));

/// x / (||x||_2 + eps) over the last axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, T eps = static_cast<T>(kNormalizeEps));

/// Identity forward; contributes no gradient to its input.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// Slice [start, start + length) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int axis, std::size_t start, std::size_t length);

/// Bilinear resize of an [h, w] map with half-pixel centres and edge
/// clamping: source = (i + 0.5) * in / out - 0.5, clamped to [0, in - 1].
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& map, std::size_t out_h, std::size_t out_w);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) {
  return neg(a);
}

/// Broadcast result shape of two operands; throws DimensionError if incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace refseg
