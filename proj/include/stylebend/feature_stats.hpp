#pragma once

// Per-channel instance statistics and AdaIN re-styling.

#include "stylebend/tensor.hpp"

namespace stylebend {

inline constexpr double kDefaultStatsEps = 1e-5;

template <typename T>
struct ChannelStats {
    Tensor<T> mu;     // [B,C]
    Tensor<T> sigma;  // [B,C], sqrt(biased variance + eps)
    T eps = T(kDefaultStatsEps);
};

// mu = spatial mean per (b, c); sigma = sqrt(spatial population variance + eps).
// Differentiable with respect to `features`.
template <typename T>
ChannelStats<T> channel_stats(const Tensor<T>& features, T eps);

// dst.sigma * (F - src.mu) / src.sigma + dst.mu
template <typename T>
Tensor<T> adain(const Tensor<T>& features, const ChannelStats<T>& src, const ChannelStats<T>& dst);

}  // namespace stylebend
