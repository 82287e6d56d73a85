#include <doctest.h>

#include <cmath>
#include <cstring>

#include "stylebend/align_losses.hpp"
#include "stylebend/ops.hpp"
#include "support.hpp"

using namespace stylebend;
using sbtest::make;
using sbtest::random_tensor;

namespace {

ChannelStats<double> stats_of(std::vector<double> mu, std::vector<double> sigma, std::size_t b, std::size_t c) {
    return {make({b, c}, std::move(mu)), make({b, c}, std::move(sigma)), 1e-5};
}

// Exact inverse of a local perturbation, computed test-side.
FactorPredictor<double> local_inverse(const Tensor<double>& alpha, const Tensor<double>& beta) {
    return [alpha, beta](const Tensor<double>& x) {
        const std::size_t b = x.dim(0), c = x.dim(1);
        std::vector<double> ar, br;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t k = 0; k < c; ++k) {
                ar.push_back(1.0 / (1.0 + alpha.values()[k]) - 1.0);
                br.push_back(1.0 / (1.0 + beta.values()[k]) - 1.0);
            }
        return RectificationFactors<double>{make({b, c}, ar), make({b, c}, br)};
    };
}

}  // namespace

TEST_CASE("stats_l1 hand value") {
    auto a = stats_of({0.0, 1.0}, {1.0, 1.0}, 1, 2);
    auto b = stats_of({0.2, 1.0}, {1.4, 1.0}, 1, 2);
    // (|0.2| + |0.4| + 0 + 0) / 2
    CHECK(stats_l1(a, b).item() == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(stats_l1(a, b).item() == stats_l1(b, a).item());
    CHECK(stats_l1(a, a).item() == 0.0);
}

TEST_CASE("stats_l1 averages over the batch") {
    auto a = stats_of({0, 0, 0, 0}, {1, 1, 1, 1}, 2, 2);
    auto b = stats_of({1, 0, 0, 0}, {1, 1, 1, 3}, 2, 2);
    // batch 0: 1/2, batch 1: 2/2
    CHECK(stats_l1(a, b).item() == doctest::Approx(0.75).epsilon(1e-14));
    CHECK_THROWS_AS(stats_l1(a, stats_of({0, 0}, {1, 1}, 1, 2)), DimensionError);
}

TEST_CASE("stats_l1 is non-negative") {
    sbtest::Rng rng(21);
    for (int i = 0; i < 50; ++i) {
        ChannelStats<double> a{random_tensor({2, 5}, rng), random_tensor({2, 5}, rng, 0.1, 2), 1e-5};
        ChannelStats<double> b{random_tensor({2, 5}, rng), random_tensor({2, 5}, rng, 0.1, 2), 1e-5};
        CHECK(stats_l1(a, b).item() >= 0.0);
    }
}

TEST_CASE("cyclic chain with an identity predictor") {
    sbtest::Rng rng(22);
    auto f = random_tensor({2, 3, 4, 4}, rng, 0, 2);
    PerturbFactors<double> pf{random_tensor({3}, rng, -0.5, 0.5), random_tensor({3}, rng, -0.5, 0.5), PerturbMode::Local};
    GlobalStatsBank<double> bank(1);
    FactorPredictor<double> identity = [](const Tensor<double>& x) {
        return RectificationFactors<double>{Tensor<double>::zeros({x.dim(0), x.dim(1)}),
                                            Tensor<double>::zeros({x.dim(0), x.dim(1)})};
    };
    auto r = cyclic_chain(f, pf, bank, 0, identity);
    CHECK(sbtest::max_abs_diff(r.rectified, r.perturbed) == 0.0);
    CHECK(sbtest::max_abs_diff(r.cycled, r.re_perturbed) == 0.0);
    CHECK(sbtest::max_abs_diff(r.perturbed, perturb_local(f, pf.alpha, pf.beta)) == 0.0);
    CHECK(sbtest::max_abs_diff(r.re_perturbed, perturb_local(r.perturbed, pf.alpha, pf.beta)) == 0.0);
}

TEST_CASE("cyclic chain with no perturbation and a fresh adapter") {
    sbtest::Rng rng(23);
    auto f = random_tensor({1, 4, 4, 4}, rng);
    Rng arng(1);
    RectAdapter<double> adapter({{0, 4}}, AdapterOptions{}, arng);
    PerturbFactors<double> none{Tensor<double>::zeros({4}), Tensor<double>::zeros({4}), PerturbMode::None};
    auto r = cyclic_chain(f, none, GlobalStatsBank<double>(1), 0, adapter);
    CHECK(sbtest::max_abs_diff(r.cycled, f) == 0.0);
}

TEST_CASE("oracle inverse closes the cycle") {
    sbtest::Rng rng(24);
    const double eps = 1e-5;
    for (int trial = 0; trial < 20; ++trial) {
        auto f = random_tensor({2, 6, 8, 8}, rng, 0, 2);
        PerturbFactors<double> pf{random_tensor({6}, rng, -0.8, 2), random_tensor({6}, rng, -0.8, 2), PerturbMode::Local};
        auto r = cyclic_chain(f, pf, GlobalStatsBank<double>(1), 0, local_inverse(pf.alpha, pf.beta));
        CHECK(sbtest::max_rel_diff(r.rectified.values(), f.values()) < 1e-10);
        CHECK(sbtest::max_rel_diff(r.cycled.values(), f.values()) < 1e-10);
        std::vector<StageStatsTrace<double>> traces{
            {channel_stats(f, eps), channel_stats(r.rectified, eps), channel_stats(r.cycled, eps)}};
        auto logits = random_tensor({1, 1, 4, 4}, rng);
        auto mask = make({1, 1, 4, 4}, std::vector<double>(16, 1.0));
        auto l = total_loss(logits, mask, traces, LossFlags{});
        CHECK(l.l_cyc.item() + l.l_align.item() < 1e-8);
    }
}

TEST_CASE("total loss composition and flags") {
    sbtest::Rng rng(25);
    const double eps = 1e-5;
    std::vector<StageStatsTrace<double>> traces;
    for (std::size_t c : {3, 5}) {
        auto a = random_tensor({2, c, 4, 4}, rng);
        auto b = random_tensor({2, c, 4, 4}, rng);
        auto d = random_tensor({2, c, 4, 4}, rng);
        traces.push_back({channel_stats(a, eps), channel_stats(b, eps), channel_stats(d, eps)});
    }
    auto logits = random_tensor({2, 1, 4, 4}, rng, -3, 3);
    std::vector<double> m(32);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (i % 3 == 0) ? 1.0 : 0.0;
    auto mask = make({2, 1, 4, 4}, m);

    auto all = total_loss(logits, mask, traces, LossFlags{true, true});
    const double sum = all.l_bce.item() + all.l_cyc.item() + all.l_align.item();
    const double total = all.total.item();
    CHECK(std::memcmp(&sum, &total, sizeof(double)) == 0);
    CHECK(all.l_bce.item() > 0.0);
    CHECK(all.l_cyc.item() > 0.0);
    CHECK(all.l_align.item() > 0.0);

    const double cyc_expected = 0.5 * (stats_l1(traces[0].original, traces[0].cycled).item() +
                                       stats_l1(traces[1].original, traces[1].cycled).item());
    const double align_expected = 0.5 * (stats_l1(traces[0].original, traces[0].rectified).item() +
                                         stats_l1(traces[1].original, traces[1].rectified).item());
    CHECK(all.l_cyc.item() == doctest::Approx(cyc_expected).epsilon(1e-14));
    CHECK(all.l_align.item() == doctest::Approx(align_expected).epsilon(1e-14));

    auto bce_only = total_loss(logits, mask, traces, LossFlags{false, false});
    CHECK(bce_only.l_cyc.item() == 0.0);
    CHECK(bce_only.l_align.item() == 0.0);
    CHECK(bce_only.total.item() == bce_only.l_bce.item());
    auto cyc_only = total_loss(logits, mask, traces, LossFlags{true, false});
    CHECK(cyc_only.l_align.item() == 0.0);
    CHECK(cyc_only.l_cyc.item() == all.l_cyc.item());
    auto align_only = total_loss(logits, mask, traces, LossFlags{false, true});
    CHECK(align_only.l_cyc.item() == 0.0);
    CHECK(align_only.l_align.item() == all.l_align.item());
    auto empty = total_loss(logits, mask, {}, LossFlags{true, true});
    CHECK(empty.total.item() == empty.l_bce.item());
}

TEST_CASE("bce against a logistic loop oracle") {
    sbtest::Rng rng(26);
    auto logits = random_tensor({1, 1, 5, 5}, rng, -8, 8);
    std::vector<double> m(25);
    for (std::size_t i = 0; i < 25; ++i) m[i] = static_cast<double>(i % 2);
    double ref = 0.0;
    for (std::size_t i = 0; i < 25; ++i) {
        const double z = logits.values()[i];
        const double p = 1.0 / (1.0 + std::exp(-z));
        ref += -(m[i] * std::log(p) + (1 - m[i]) * std::log1p(-p));
    }
    ref /= 25.0;
    auto l = total_loss(logits, make({1, 1, 5, 5}, m), {}, LossFlags{false, false});
    CHECK(l.l_bce.item() == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("gradients through the full cyclic objective") {
    sbtest::Rng rng(27);
    const double eps = 1e-5;
    Rng arng(3);
    RectAdapter<double> adapter({{0, 4}}, AdapterOptions{}, arng);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& p : adapter.parameters())
        for (auto& v : p.mutable_values()) v = nd(arng);
    auto f = random_tensor({2, 4, 4, 4}, rng, 0, 2);
    auto logits = random_tensor({2, 1, 4, 4}, rng, -2, 2);
    std::vector<double> m(32);
    for (std::size_t i = 0; i < 32; ++i) m[i] = (i % 4 == 0) ? 1.0 : 0.0;
    auto mask = make({2, 1, 4, 4}, m);
    GlobalStatsBank<double> bank(1);
    bank.seed(0, random_tensor({4}, rng, 0.5, 1.5));
    for (PerturbMode mode : {PerturbMode::Local, PerturbMode::Global}) {
        PerturbFactors<double> pf{random_tensor({4}, rng, -0.5, 0.5), random_tensor({4}, rng, -0.5, 0.5), mode};
        std::vector<Tensor<double>> inputs{f, logits};
        for (auto& p : adapter.parameters()) inputs.push_back(p);
        auto r = sbtest::finite_difference_check(
            [&] {
                auto cyc = cyclic_chain(f, pf, bank, 0, adapter);
                std::vector<StageStatsTrace<double>> t{
                    {channel_stats(f, eps), channel_stats(cyc.rectified, eps), channel_stats(cyc.cycled, eps)}};
                return total_loss(mul(logits, reduce_mean_all(cyc.cycled)), mask, t, LossFlags{}).total;
            },
            inputs);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.skipped * 20 <= r.checked + r.skipped);
    }
}
