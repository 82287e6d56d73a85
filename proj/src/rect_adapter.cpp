#include "stylebend/rect_adapter.hpp"

#include <cmath>

#include "stylebend/feature_stats.hpp"
#include "stylebend/ops.hpp"

namespace stylebend {

namespace {

std::string param_name(std::size_t stage, const char* leaf) {
    return "adapter.stage" + std::to_string(stage) + "." + leaf;
}

template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(d(rng));
    return Tensor<T>(shape, std::move(v), true);
}

}  // namespace

template <typename T>
RectAdapter<T>::RectAdapter(const std::map<std::size_t, std::size_t>& stage_channels, const AdapterOptions& options,
                            Rng& rng)
    : options_(options) {
    if (options.reduction == 0) throw std::invalid_argument("adapter reduction must be >= 1");
    if (!(options.scale > 0.0)) throw std::invalid_argument("adapter output scale must be positive");
    for (const auto& [stage, c] : stage_channels) {
        if (c == 0) throw std::invalid_argument("adapter stage with zero channels");
        const std::size_t hidden = std::max<std::size_t>(1, c / options.reduction);
        StageAdapter<T> s;
        s.channels = c;
        s.fc1_weight = kaiming_uniform<T>(Shape{hidden, 2 * c}, 2 * c, rng);
        s.fc1_bias = Tensor<T>::zeros(Shape{hidden}, true);
        s.fc2_weight = Tensor<T>::zeros(Shape{2 * c, hidden}, true);
        s.fc2_bias = Tensor<T>::zeros(Shape{2 * c}, true);
        stages_.emplace(stage, std::move(s));
    }
}

template <typename T>
const StageAdapter<T>& RectAdapter<T>::stage(std::size_t stage) const {
    auto it = stages_.find(stage);
    if (it == stages_.end()) throw std::out_of_range("adapter has no parameters for stage " + std::to_string(stage));
    return it->second;
}

template <typename T>
StageAdapter<T>& RectAdapter<T>::stage(std::size_t stage) {
    auto it = stages_.find(stage);
    if (it == stages_.end()) throw std::out_of_range("adapter has no parameters for stage " + std::to_string(stage));
    return it->second;
}

template <typename T>
std::vector<std::size_t> RectAdapter<T>::stage_indices() const {
    std::vector<std::size_t> r;
    for (const auto& kv : stages_) r.push_back(kv.first);
    return r;
}

template <typename T>
std::vector<Tensor<T>> RectAdapter<T>::parameters() const {
    std::vector<Tensor<T>> r;
    for (const auto& [_, s] : stages_) {
        r.push_back(s.fc1_weight);
        r.push_back(s.fc1_bias);
        r.push_back(s.fc2_weight);
        r.push_back(s.fc2_bias);
    }
    return r;
}

template <typename T>
void RectAdapter<T>::set_requires_grad(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
}

template <typename T>
void RectAdapter<T>::zero() {
    for (auto& p : parameters()) {
        auto v = p.mutable_values();
        std::fill(v.begin(), v.end(), T(0));
    }
}

template <typename T>
void RectAdapter<T>::save(Checkpoint& ck) const {
    for (const auto& [i, s] : stages_) {
        ck.put(param_name(i, "fc1.weight"), s.fc1_weight);
        ck.put(param_name(i, "fc1.bias"), s.fc1_bias);
        ck.put(param_name(i, "fc2.weight"), s.fc2_weight);
        ck.put(param_name(i, "fc2.bias"), s.fc2_bias);
    }
}

template <typename T>
void RectAdapter<T>::load(const Checkpoint& ck) {
    auto assign = [&](Tensor<T>& dst, const std::string& name) {
        auto src = ck.get<T>(name);
        if (src.shape() != dst.shape()) {
            throw CheckpointError("shape mismatch for " + name + ": " + shape_str(src.shape()) + " vs " +
                                  shape_str(dst.shape()));
        }
        auto d = dst.mutable_values();
        std::copy(src.values().begin(), src.values().end(), d.begin());
    };
    for (auto& [i, s] : stages_) {
        assign(s.fc1_weight, param_name(i, "fc1.weight"));
        assign(s.fc1_bias, param_name(i, "fc1.bias"));
        assign(s.fc2_weight, param_name(i, "fc2.weight"));
        assign(s.fc2_bias, param_name(i, "fc2.bias"));
    }
}

template <typename T>
RectificationFactors<T> predict_factors(const Tensor<T>& features, const RectAdapter<T>& adapter, std::size_t stage) {
    const auto& p = adapter.stage(stage);
    if (features.rank() != 4 || features.dim(1) != p.channels) {
        throw DimensionError("predict_factors: features " + shape_str(features.shape()) + " vs adapter channels " +
                             std::to_string(p.channels));
    }
    const auto stats = channel_stats(features, static_cast<T>(adapter.options().eps));
    auto x = concat<T>({stats.mu, stats.sigma}, 1);
    auto hidden = relu(linear(x, p.fc1_weight, p.fc1_bias));
    auto out = linear(hidden, p.fc2_weight, p.fc2_bias);
    const T s = static_cast<T>(adapter.options().scale);
    const std::size_t c = p.channels;
    return {scale(tanh(slice(out, 1, 0, c)), s), scale(tanh(slice(out, 1, c, c)), s)};
}

template <typename T>
Tensor<T> rectify(const Tensor<T>& features, const RectificationFactors<T>& factors) {
    if (features.rank() != 4) throw DimensionError("rectify expects [B,C,H,W], got " + shape_str(features.shape()));
    const Shape& fs = features.shape();
    for (const auto* f : {&factors.alpha_rect, &factors.beta_rect}) {
        const Shape& s = f->shape();
        const bool ok = (s.size() == 2 && s[1] == fs[1] && (s[0] == fs[0] || s[0] == 1)) || (s.size() == 1 && s[0] == fs[1]);
        if (!ok) throw DimensionError("rectify: factor shape " + shape_str(s) + " vs features " + shape_str(fs));
    }
    auto mu = reduce_mean_hw(features);
    auto shift = mul(sub(factors.alpha_rect, factors.beta_rect), mu);
    return add(mul(features, add_scalar(factors.beta_rect, T(1))), shift);
}

template <typename T>
Tensor<T> rectify_stage(const Tensor<T>& features, const RectAdapter<T>& adapter, std::size_t stage, bool enabled) {
    if (!enabled) return features;
    return rectify(features, predict_factors(features, adapter, stage));
}

template <typename T>
RectificationFactors<T> inverse_factors(const Tensor<T>& alpha, const Tensor<T>& beta, std::size_t batch) {
    auto invert = [batch](const Tensor<T>& f) {
        const std::size_t c = f.numel();
        std::vector<T> v(batch * c);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < c; ++i) v[b * c + i] = T(1) / (T(1) + f.values()[i]) - T(1);
        return Tensor<T>(Shape{batch, c}, std::move(v));
    };
    if (alpha.rank() != 1 || beta.rank() != 1) throw DimensionError("inverse_factors expects [C] factors");
    return {invert(alpha), invert(beta)};
}

#define STYLEBEND_INSTANTIATE(T)                                                                                  \
    template class RectAdapter<T>;                                                                                \
    template RectificationFactors<T> predict_factors(const Tensor<T>&, const RectAdapter<T>&, std::size_t);       \
    template Tensor<T> rectify(const Tensor<T>&, const RectificationFactors<T>&);                                 \
    template Tensor<T> rectify_stage(const Tensor<T>&, const RectAdapter<T>&, std::size_t, bool);                 \
    template RectificationFactors<T> inverse_factors(const Tensor<T>&, const Tensor<T>&, std::size_t);

STYLEBEND_INSTANTIATE(float)
STYLEBEND_INSTANTIATE(double)

#undef STYLEBEND_INSTANTIATE

}  // namespace stylebend
