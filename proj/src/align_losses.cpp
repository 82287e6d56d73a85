#include "stylebend/align_losses.hpp"

#include "stylebend/ops.hpp"

namespace stylebend {

template <typename T>
Tensor<T> stats_l1(const ChannelStats<T>& a, const ChannelStats<T>& b) {
    if (a.mu.shape() != b.mu.shape() || a.sigma.shape() != b.sigma.shape()) {
        throw DimensionError("stats_l1: shape mismatch " + shape_str(a.mu.shape()) + " vs " + shape_str(b.mu.shape()));
    }
    return reduce_mean_all(add(abs(sub(a.mu, b.mu)), abs(sub(a.sigma, b.sigma))));
}

template <typename T>
CyclicResult<T> cyclic_chain(const Tensor<T>& original, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage, const FactorPredictor<T>& predict) {
    CyclicResult<T> r;
    r.perturbed = apply_perturbation(original, factors, bank, stage);
    r.rectified = rectify(r.perturbed, predict(r.perturbed));
    r.re_perturbed = apply_perturbation(r.rectified, factors, bank, stage);
    r.cycled = rectify(r.re_perturbed, predict(r.re_perturbed));
    return r;
}

template <typename T>
CyclicResult<T> cyclic_chain(const Tensor<T>& original, const PerturbFactors<T>& factors,
                             const GlobalStatsBank<T>& bank, std::size_t stage, const RectAdapter<T>& adapter) {
    return cyclic_chain<T>(original, factors, bank, stage,
                           [&](const Tensor<T>& f) { return predict_factors(f, adapter, stage); });
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const Tensor<T>& mask,
                            const std::vector<StageStatsTrace<T>>& stages, const LossFlags& flags) {
    LossBreakdown<T> out;
    out.l_bce = bce_with_logits(logits, mask);
    auto stage_mean = [&](bool enabled, auto pick) {
        if (!enabled || stages.empty()) return Tensor<T>::scalar(T(0));
        Tensor<T> acc;
        for (const auto& s : stages) {
            auto term = stats_l1(s.original, pick(s));
            acc = acc.defined() ? add(acc, term) : term;
        }
        return stages.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(stages.size()));
    };
    out.l_cyc = stage_mean(flags.cyc, [](const StageStatsTrace<T>& s) -> const ChannelStats<T>& { return s.cycled; });
    out.l_align = stage_mean(flags.align, [](const StageStatsTrace<T>& s) -> const ChannelStats<T>& { return s.rectified; });
    out.total = add(add(out.l_bce, out.l_cyc), out.l_align);
    return out;
}

#define STYLEBEND_INSTANTIATE(T)                                                                                 \
    template Tensor<T> stats_l1(const ChannelStats<T>&, const ChannelStats<T>&);                                 \
    template CyclicResult<T> cyclic_chain(const Tensor<T>&, const PerturbFactors<T>&, const GlobalStatsBank<T>&, \
                                          std::size_t, const FactorPredictor<T>&);                               \
    template CyclicResult<T> cyclic_chain(const Tensor<T>&, const PerturbFactors<T>&, const GlobalStatsBank<T>&, \
                                          std::size_t, const RectAdapter<T>&);                                   \
    template LossBreakdown<T> total_loss(const Tensor<T>&, const Tensor<T>&,                                     \
                                         const std::vector<StageStatsTrace<T>>&, const LossFlags&);

STYLEBEND_INSTANTIATE(float)
STYLEBEND_INSTANTIATE(double)

#undef STYLEBEND_INSTANTIATE

}  // namespace stylebend
