#pragma once

// Style synthesis by perturbing per-channel feature statistics.
//
// Local mode rescales an image's own channel means and deviations:
//   F_p = (1 + beta) * F_o + (alpha - beta) * mu_o
// Global mode substitutes a dataset-level running mean for mu_o.

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stylebend/feature_stats.hpp"
#include "stylebend/tensor.hpp"

namespace stylebend {

using Rng = std::mt19937_64;

enum class NoiseKind { Gaussian, Beta, Uniform };

std::string to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(const std::string& s);

// Gaussian: zero mean, `a` = std. Beta: shapes (a, b), samples used raw in
// (0, 1). Uniform: [a, b).
struct NoiseSpec {
    NoiseKind kind = NoiseKind::Gaussian;
    double a = 1.0;
    double b = 0.0;

    static NoiseSpec gaussian(double std) { return {NoiseKind::Gaussian, std, 0.0}; }
    static NoiseSpec beta(double a, double b) { return {NoiseKind::Beta, a, b}; }
    static NoiseSpec uniform(double lo, double hi) { return {NoiseKind::Uniform, lo, hi}; }

    void validate() const;
    bool operator==(const NoiseSpec&) const = default;
};

template <typename T>
Tensor<T> sample_noise(const NoiseSpec& spec, const Shape& shape, Rng& rng);

enum class PerturbMode { None, Local, Global };

std::string to_string(PerturbMode mode);

struct PerturbConfig {
    double p_local = 0.5;
    double p_global = 0.5;
    NoiseSpec local_noise = NoiseSpec::gaussian(0.75);
    NoiseSpec global_noise = NoiseSpec::gaussian(1.0);
    std::vector<std::size_t> stages{0, 1, 2};
    // Sampled beta is clamped from below so that 1 + beta stays positive.
    double beta_floor = -0.95;

    void validate() const;
    bool operator==(const PerturbConfig&) const = default;
};

// Momentum-averaged dataset channel means, one [C] vector per stage.
template <typename T>
class GlobalStatsBank {
public:
    explicit GlobalStatsBank(std::size_t num_stages = 0, T lambda = T(0.99));

    std::size_t num_stages() const { return mu_.size(); }
    T lambda() const { return lambda_; }
    bool initialized(std::size_t stage) const;
    const Tensor<T>& mu_datum(std::size_t stage) const;

    // Sets the running mean explicitly; later updates use the recurrence.
    void seed(std::size_t stage, const Tensor<T>& mu);

    // Batch-averages stats.mu to [C] and folds it in:
    //   mu_datum = lambda * mu_datum + (1 - lambda) * mu_o
    // The first update of an unseeded stage copies mu_o.
    void update(const ChannelStats<T>& stats, std::size_t stage);
    void update_mean(const Tensor<T>& channel_mean, std::size_t stage);

private:
    void check_stage(std::size_t stage) const;

    std::vector<Tensor<T>> mu_;
    std::vector<bool> init_;
    T lambda_;
};

// alpha, beta: [C] or [B,C].
template <typename T>
Tensor<T> perturb_local(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta);

template <typename T>
Tensor<T> perturb_global(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta,
                         const GlobalStatsBank<T>& bank, std::size_t stage);

// The factors and mode drawn for one stage of one episode.
template <typename T>
struct PerturbFactors {
    Tensor<T> alpha;
    Tensor<T> beta;
    PerturbMode mode = PerturbMode::None;
};

template <typename T>
struct PerturbOutcome {
    Tensor<T> features;
    PerturbFactors<T> factors;
};

// Applies `factors` in their recorded mode; None is the identity.
template <typename T>
Tensor<T> apply_perturbation(const Tensor<T>& features, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage);

// Draws the mode (local first, global only if local was not taken) and
// per-channel factors, then perturbs. Passing `shared` reuses those factors
// and mode and draws nothing.
template <typename T>
PerturbOutcome<T> gated_perturb(const Tensor<T>& features, const PerturbConfig& cfg, const GlobalStatsBank<T>& bank,
                                std::size_t stage, Rng& rng, const PerturbFactors<T>* shared = nullptr);

// Mode and factors only, no features touched.
template <typename T>
PerturbFactors<T> draw_factors(const PerturbConfig& cfg, std::size_t channels, Rng& rng);

}  // namespace stylebend
