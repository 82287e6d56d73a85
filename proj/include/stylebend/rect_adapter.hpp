#pragma once

// Domain-rectifying adapter.
//
// Per hooked stage, a bottleneck MLP reads the pooled channel statistics
// (mu, sigma) of a feature map and emits bounded rectification vectors
//   alpha_rect = s * tanh(a),  beta_rect = s * tanh(b)
// which re-style the map as
//   F_rect = (1 + beta_rect) * F + (alpha_rect - beta_rect) * mu(F).
// The output layer starts at zero, so a fresh adapter is the identity.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "stylebend/checkpoint.hpp"
#include "stylebend/style_perturb.hpp"
#include "stylebend/tensor.hpp"

namespace stylebend {

template <typename T>
struct RectificationFactors {
    Tensor<T> alpha_rect;  // [B,C]
    Tensor<T> beta_rect;   // [B,C]
};

template <typename T>
struct StageAdapter {
    std::size_t channels = 0;
    Tensor<T> fc1_weight;  // [C/r, 2C]
    Tensor<T> fc1_bias;    // [C/r]
    Tensor<T> fc2_weight;  // [2C, C/r]
    Tensor<T> fc2_bias;    // [2C]
};

struct AdapterOptions {
    std::size_t reduction = 4;
    double scale = 1.0;
    double eps = kDefaultStatsEps;

    bool operator==(const AdapterOptions&) const = default;
};

template <typename T>
class RectAdapter {
public:
    RectAdapter() = default;
    // stage_channels maps stage index -> channel count for each adapted stage.
    RectAdapter(const std::map<std::size_t, std::size_t>& stage_channels, const AdapterOptions& options, Rng& rng);

    bool has_stage(std::size_t stage) const { return stages_.count(stage) != 0; }
    const StageAdapter<T>& stage(std::size_t stage) const;
    StageAdapter<T>& stage(std::size_t stage);
    std::vector<std::size_t> stage_indices() const;

    const AdapterOptions& options() const { return options_; }
    std::vector<Tensor<T>> parameters() const;
    void set_requires_grad(bool on);

    // Every weight and bias set to zero.
    void zero();

    void save(Checkpoint& ck) const;
    // Loads "adapter.stage{i}.*" entries for every configured stage.
    void load(const Checkpoint& ck);

private:
    AdapterOptions options_;
    std::map<std::size_t, StageAdapter<T>> stages_;
};

template <typename T>
RectificationFactors<T> predict_factors(const Tensor<T>& features, const RectAdapter<T>& adapter, std::size_t stage);

template <typename T>
Tensor<T> rectify(const Tensor<T>& features, const RectificationFactors<T>& factors);

// enabled: rectify(F, predict_factors(F)); disabled: F.
template <typename T>
Tensor<T> rectify_stage(const Tensor<T>& features, const RectAdapter<T>& adapter, std::size_t stage, bool enabled);

// Factors that exactly undo a perturbation with (alpha, beta) in the
// statistics: 1/(1+alpha) - 1 and 1/(1+beta) - 1. Reference for checks.
template <typename T>
RectificationFactors<T> inverse_factors(const Tensor<T>& alpha, const Tensor<T>& beta, std::size_t batch);

}  // namespace stylebend
