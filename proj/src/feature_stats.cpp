#include "stylebend/feature_stats.hpp"

#include "stylebend/ops.hpp"

namespace stylebend {

template <typename T>
ChannelStats<T> channel_stats(const Tensor<T>& features, T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("channel_stats: eps must be positive");
    if (features.rank() != 4) {
        throw DimensionError("channel_stats expects [B,C,H,W], got " + shape_str(features.shape()));
    }
    auto mu = reduce_mean_hw(features);
    auto centered = sub(features, mu);
    auto var = reduce_mean_hw(square(centered));
    auto sigma = sqrt(add_scalar(var, eps));
    return {std::move(mu), std::move(sigma), eps};
}

template <typename T>
Tensor<T> adain(const Tensor<T>& features, const ChannelStats<T>& src, const ChannelStats<T>& dst) {
    if (features.rank() != 4) throw DimensionError("adain expects [B,C,H,W], got " + shape_str(features.shape()));
    const Shape& fs = features.shape();
    for (const auto* s : {&src.mu, &src.sigma, &dst.mu, &dst.sigma}) {
        const Shape& ss = s->shape();
        const bool ok = (ss.size() == 2 && (ss[0] == fs[0] || ss[0] == 1) && ss[1] == fs[1]) ||
                        (ss.size() == 1 && ss[0] == fs[1]);
        if (!ok) throw DimensionError("adain: statistics shape " + shape_str(ss) + " vs features " + shape_str(fs));
    }
    auto normalized = div(sub(features, src.mu), src.sigma);
    return add(mul(normalized, dst.sigma), dst.mu);
}

template ChannelStats<float> channel_stats(const Tensor<float>&, float);
template ChannelStats<double> channel_stats(const Tensor<double>&, double);
template Tensor<float> adain(const Tensor<float>&, const ChannelStats<float>&, const ChannelStats<float>&);
template Tensor<double> adain(const Tensor<double>&, const ChannelStats<double>&, const ChannelStats<double>&);

}  // namespace stylebend
