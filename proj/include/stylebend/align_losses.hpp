#pragma once

// Cyclic domain alignment: perturb -> rectify -> re-perturb -> re-rectify,
// plus the statistic-matching losses and the total objective
//   L = L_bce + L_cyc + L_align   (unit weights).

#include <functional>
#include <vector>

#include "stylebend/feature_stats.hpp"
#include "stylebend/rect_adapter.hpp"
#include "stylebend/style_perturb.hpp"

namespace stylebend {

template <typename T>
struct LossBreakdown {
    Tensor<T> l_bce;
    Tensor<T> l_cyc;
    Tensor<T> l_align;
    Tensor<T> total;
};

struct LossFlags {
    bool cyc = true;
    bool align = true;

    bool operator==(const LossFlags&) const = default;
};

// (1/C) sum_c (|mu_a - mu_b| + |sigma_a - sigma_b|), averaged over the batch.
template <typename T>
Tensor<T> stats_l1(const ChannelStats<T>& a, const ChannelStats<T>& b);

template <typename T>
using FactorPredictor = std::function<RectificationFactors<T>(const Tensor<T>&)>;

template <typename T>
struct CyclicResult {
    Tensor<T> perturbed;        // F_p
    Tensor<T> rectified;        // F_rect
    Tensor<T> re_perturbed;     // F_rect^p
    Tensor<T> cycled;           // F'_rect
};

// The re-perturbation reuses the same factors, mode and mean reference.
template <typename T>
CyclicResult<T> cyclic_chain(const Tensor<T>& original, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage, const FactorPredictor<T>& predict);

template <typename T>
CyclicResult<T> cyclic_chain(const Tensor<T>& original, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage, const RectAdapter<T>& adapter);

// Statistics of F_o, F_rect and F'_rect at one hooked stage.
template <typename T>
struct StageStatsTrace {
    ChannelStats<T> original;
    ChannelStats<T> rectified;
    ChannelStats<T> cycled;
};

// Disabled components are exact zeros that do not enter the graph.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const Tensor<T>& mask,
                            const std::vector<StageStatsTrace<T>>& stages, const LossFlags& flags);

}  // namespace stylebend
