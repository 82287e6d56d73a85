#pragma once

// Differentiable tensor ops.
//
// Binary ops broadcast numpy-style over equal-rank shapes (each extent equal
// or 1). A rank-1 [C] or rank-2 [B,C] operand against a rank-4 [B,C,H,W]
// operand is aligned on the channel axis first, so per-channel statistics
// and factors combine with feature maps directly. Other rank differences
// align to the right.

#include <cstddef>
#include <vector>

#include "stylebend/tensor.hpp"

namespace stylebend {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> reduce_mean_all(const Tensor<T>& a);
// Sum over the listed axes; reduced axes are dropped from the result.
template <typename T> Tensor<T> sum_dims(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> mean_dims(const Tensor<T>& a, const std::vector<std::size_t>& axes);
// [B,C,H,W] -> [B,C]
template <typename T> Tensor<T> reduce_mean_hw(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

// x [B,N], weight [M,N], bias [M] (may be undefined) -> [B,M]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] (may be undefined)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0);

enum class PoolKind { Average, Max };

template <typename T> Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, std::size_t window);

// Bilinear resize with half-pixel centers, [B,C,h,w] -> [B,C,H,W].
template <typename T> Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t height, std::size_t width);

// Mean binary cross-entropy on logits. Probabilities are clamped to
// [1e-7, 1 - 1e-7]; the gradient is zero where the clamp is active.
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

inline constexpr double kBceProbFloor = 1e-7;

}  // namespace stylebend
