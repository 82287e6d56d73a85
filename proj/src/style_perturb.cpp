#include "stylebend/style_perturb.hpp"

#include <algorithm>
#include <stdexcept>

#include "stylebend/ops.hpp"

namespace stylebend {

std::string to_string(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::Gaussian: return "gaussian";
        case NoiseKind::Beta: return "beta";
        case NoiseKind::Uniform: return "uniform";
    }
    return "?";
}

NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "gaussian") return NoiseKind::Gaussian;
    if (s == "beta") return NoiseKind::Beta;
    if (s == "uniform") return NoiseKind::Uniform;
    throw std::invalid_argument("unknown noise kind '" + s + "'");
}

std::string to_string(PerturbMode mode) {
    switch (mode) {
        case PerturbMode::None: return "none";
        case PerturbMode::Local: return "local";
        case PerturbMode::Global: return "global";
    }
    return "?";
}

void NoiseSpec::validate() const {
    switch (kind) {
        case NoiseKind::Gaussian:
            if (!(a > 0.0)) throw std::invalid_argument("gaussian noise: std must be > 0");
            break;
        case NoiseKind::Beta:
            if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("beta noise: shape parameters must be > 0");
            break;
        case NoiseKind::Uniform:
            if (!(a < b)) throw std::invalid_argument("uniform noise: lo must be < hi");
            break;
    }
}

void PerturbConfig::validate() const {
    if (p_local < 0.0 || p_local > 1.0 || p_global < 0.0 || p_global > 1.0) {
        throw std::invalid_argument("perturbation probabilities must lie in [0, 1]");
    }
    local_noise.validate();
    global_noise.validate();
    if ((p_local > 0.0 || p_global > 0.0) && stages.empty()) {
        throw std::invalid_argument("perturbation enabled but no stages selected");
    }
    if (!(beta_floor > -1.0)) throw std::invalid_argument("beta floor must exceed -1");
}

template <typename T>
Tensor<T> sample_noise(const NoiseSpec& spec, const Shape& shape, Rng& rng) {
    spec.validate();
    std::vector<T> out(shape_numel(shape));
    switch (spec.kind) {
        case NoiseKind::Gaussian: {
            std::normal_distribution<double> d(0.0, spec.a);
            for (auto& v : out) v = static_cast<T>(d(rng));
            break;
        }
        case NoiseKind::Beta: {
            std::gamma_distribution<double> ga(spec.a, 1.0);
            std::gamma_distribution<double> gb(spec.b, 1.0);
            for (auto& v : out) {
                const double x = ga(rng);
                const double y = gb(rng);
                v = static_cast<T>(x / (x + y));
            }
            break;
        }
        case NoiseKind::Uniform: {
            std::uniform_real_distribution<double> d(spec.a, spec.b);
            for (auto& v : out) v = static_cast<T>(d(rng));
            break;
        }
    }
    return Tensor<T>(shape, std::move(out));
}

template <typename T>
GlobalStatsBank<T>::GlobalStatsBank(std::size_t num_stages, T lambda)
    : mu_(num_stages), init_(num_stages, false), lambda_(lambda) {
    if (!(lambda >= T(0) && lambda <= T(1))) throw std::invalid_argument("bank momentum must lie in [0, 1]");
}

template <typename T>
void GlobalStatsBank<T>::check_stage(std::size_t stage) const {
    if (stage >= mu_.size()) throw std::out_of_range("bank has no stage " + std::to_string(stage));
}

template <typename T>
bool GlobalStatsBank<T>::initialized(std::size_t stage) const {
    check_stage(stage);
    return init_[stage];
}

template <typename T>
const Tensor<T>& GlobalStatsBank<T>::mu_datum(std::size_t stage) const {
    if (!initialized(stage)) throw std::logic_error("global stats bank stage " + std::to_string(stage) + " is not initialized");
    return mu_[stage];
}

template <typename T>
void GlobalStatsBank<T>::seed(std::size_t stage, const Tensor<T>& mu) {
    check_stage(stage);
    if (mu.rank() != 1) throw DimensionError("bank entries are [C] vectors, got " + shape_str(mu.shape()));
    mu_[stage] = mu.detach();
    init_[stage] = true;
}

template <typename T>
void GlobalStatsBank<T>::update(const ChannelStats<T>& stats, std::size_t stage) {
    const auto& mu = stats.mu;
    if (mu.rank() != 2) throw DimensionError("bank update expects [B,C] means, got " + shape_str(mu.shape()));
    const std::size_t batch = mu.dim(0);
    const std::size_t channels = mu.dim(1);
    std::vector<T> avg(channels, T(0));
    auto v = mu.values();
    for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) acc += v[b * channels + c];
        avg[c] = static_cast<T>(acc / static_cast<double>(batch));
    }
    update_mean(Tensor<T>(Shape{channels}, std::move(avg)), stage);
}

template <typename T>
void GlobalStatsBank<T>::update_mean(const Tensor<T>& channel_mean, std::size_t stage) {
    check_stage(stage);
    if (channel_mean.rank() != 1) throw DimensionError("bank update expects a [C] mean");
    if (!init_[stage]) {
        seed(stage, channel_mean);
        return;
    }
    if (mu_[stage].shape() != channel_mean.shape()) throw DimensionError("bank update channel count mismatch");
    auto cur = mu_[stage].mutable_values();
    auto obs = channel_mean.values();
    for (std::size_t c = 0; c < cur.size(); ++c) cur[c] = lambda_ * cur[c] + (T(1) - lambda_) * obs[c];
}

namespace {

template <typename T>
void check_factor_shape(const Tensor<T>& features, const Tensor<T>& factor, const char* what) {
    if (features.rank() != 4) throw DimensionError("perturbation expects [B,C,H,W] features");
    const Shape& s = factor.shape();
    const std::size_t c = features.dim(1);
    const bool ok = (s.size() == 1 && s[0] == c) ||
                    (s.size() == 2 && s[1] == c && (s[0] == features.dim(0) || s[0] == 1));
    if (!ok) throw DimensionError(std::string(what) + " shape " + shape_str(s) + " incompatible with " + shape_str(features.shape()));
}

// (1 + beta) * F + (alpha - beta) * reference
template <typename T>
Tensor<T> restyle(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta, const Tensor<T>& reference) {
    check_factor_shape(features, alpha, "alpha");
    check_factor_shape(features, beta, "beta");
    auto shift = mul(sub(alpha, beta), reference);
    return add(mul(features, add_scalar(beta, T(1))), shift);
}

}  // namespace

template <typename T>
Tensor<T> perturb_local(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta) {
    if (features.rank() != 4) throw DimensionError("perturb_local expects [B,C,H,W], got " + shape_str(features.shape()));
    return restyle(features, alpha, beta, reduce_mean_hw(features));
}

template <typename T>
Tensor<T> perturb_global(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta,
                         const GlobalStatsBank<T>& bank, std::size_t stage) {
    const auto& ref = bank.mu_datum(stage);
    if (features.rank() != 4 || ref.dim(0) != features.dim(1)) {
        throw DimensionError("perturb_global: bank channel count does not match features " + shape_str(features.shape()));
    }
    return restyle(features, alpha, beta, ref);
}

template <typename T>
Tensor<T> apply_perturbation(const Tensor<T>& features, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage) {
    switch (factors.mode) {
        case PerturbMode::None: return features;
        case PerturbMode::Local: return perturb_local(features, factors.alpha, factors.beta);
        case PerturbMode::Global: return perturb_global(features, factors.alpha, factors.beta, bank, stage);
    }
    return features;
}

template <typename T>
PerturbFactors<T> draw_factors(const PerturbConfig& cfg, std::size_t channels, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    PerturbMode mode = PerturbMode::None;
    if (unit(rng) < cfg.p_local) {
        mode = PerturbMode::Local;
    } else if (unit(rng) < cfg.p_global) {
        mode = PerturbMode::Global;
    }
    if (mode == PerturbMode::None) {
        return {Tensor<T>::zeros(Shape{channels}), Tensor<T>::zeros(Shape{channels}), mode};
    }
    const NoiseSpec& spec = mode == PerturbMode::Local ? cfg.local_noise : cfg.global_noise;
    auto alpha = sample_noise<T>(spec, Shape{channels}, rng);
    auto beta = sample_noise<T>(spec, Shape{channels}, rng);
    for (auto& v : beta.mutable_values()) v = std::max(v, static_cast<T>(cfg.beta_floor));
    return {std::move(alpha), std::move(beta), mode};
}

template <typename T>
PerturbOutcome<T> gated_perturb(const Tensor<T>& features, const PerturbConfig& cfg, const GlobalStatsBank<T>& bank,
                                std::size_t stage, Rng& rng, const PerturbFactors<T>* shared) {
    if (features.rank() != 4) throw DimensionError("gated_perturb expects [B,C,H,W] features");
    PerturbFactors<T> factors = shared ? *shared : draw_factors<T>(cfg, features.dim(1), rng);
    auto out = apply_perturbation(features, factors, bank, stage);
    return {std::move(out), std::move(factors)};
}

#define STYLEBEND_INSTANTIATE(T)                                                                                    \
    template Tensor<T> sample_noise<T>(const NoiseSpec&, const Shape&, Rng&);                                       \
    template class GlobalStatsBank<T>;                                                                              \
    template Tensor<T> perturb_local(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> perturb_global(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                         \
                                      const GlobalStatsBank<T>&, std::size_t);                                      \
    template Tensor<T> apply_perturbation(const Tensor<T>&, const PerturbFactors<T>&, const GlobalStatsBank<T>&,    \
                                          std::size_t);                                                             \
    template PerturbFactors<T> draw_factors<T>(const PerturbConfig&, std::size_t, Rng&);                            \
    template PerturbOutcome<T> gated_perturb(const Tensor<T>&, const PerturbConfig&, const GlobalStatsBank<T>&,     \
                                             std::size_t, Rng&, const PerturbFactors<T>*);

STYLEBEND_INSTANTIATE(float)
STYLEBEND_INSTANTIATE(double)

#undef STYLEBEND_INSTANTIATE

}  // namespace stylebend
