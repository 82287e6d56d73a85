#include "stylebend/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "stylebend/align_losses.hpp"
#include "stylebend/fewshot_seg.hpp"
#include "stylebend/feature_stats.hpp"
#include "stylebend/ops.hpp"
#include "stylebend/rect_adapter.hpp"
#include "stylebend/style_perturb.hpp"

namespace stylebend {

namespace {

using D = Tensor<double>;

D rand_tensor(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return D(shape, std::move(v), requires_grad);
}

// Uniform in +-[lo, hi], away from zero.
D rand_away_from_zero(const Shape& shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return D(shape, std::move(v), true);
}

D binary_tensor(const Shape& shape, Rng& rng) {
    std::bernoulli_distribution b(0.4);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
    return D(shape, std::move(v));
}

// Generic linear functional so that every output element carries its own weight.
struct Probe {
    D weights;
    D operator()(const D& t) const { return sum(mul(t, weights)); }
};

Probe make_probe(const Shape& shape, Rng& rng) { return {rand_tensor(shape, rng, -1.0, 1.0, false)}; }

double max_abs_diff(const D& a, const D& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
    return m;
}

double max_rel_diff(const D& a, const D& b, double floor = 1e-9) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]) / std::max(std::abs(bv[i]), floor));
    return m;
}

CheckResult bounded(const std::string& name, double err, double tol, const std::string& detail = {}) {
    return {name, err, tol, err < tol, detail};
}

Shape random_shape(Rng& rng, std::size_t max_b, std::size_t max_c, std::size_t max_hw) {
    std::uniform_int_distribution<std::size_t> b(1, max_b), c(1, max_c), h(1, max_hw), w(1, max_hw);
    return Shape{b(rng), c(rng), h(rng), w(rng)};
}

// 1 + factor drawn uniformly in [0.2, 3].
D rand_factor(std::size_t c, Rng& rng) { return rand_tensor(Shape{c}, rng, -0.8, 2.0, false); }

// ---------------------------------------------------------------------------

SuiteReport suite_algebra(std::uint64_t seed) {
    SuiteReport r{"algebra", {}, 0.0};
    Rng rng(seed);
    double perturb_err = 0.0;
    double rect_err = 0.0;
    double global_err = 0.0;
    const double eps = kDefaultStatsEps;
    for (int trial = 0; trial < 100; ++trial) {
        const Shape shape = random_shape(rng, 4, 8, 16);
        const std::size_t c = shape[1];
        auto f = rand_tensor(shape, rng, -2.0, 2.0, false);
        auto alpha = rand_factor(c, rng);
        auto beta = rand_factor(c, rng);
        auto so = channel_stats(f, eps);

        // sigma_p (F - mu_o) / sigma_o + mu_p with mu_p, sigma_p rescaled
        ChannelStats<double> sp{mul(so.mu, add_scalar(alpha, 1.0)), mul(so.sigma, add_scalar(beta, 1.0)), eps};
        auto fp_adain = adain(f, so, sp);
        auto fp = perturb_local(f, alpha, beta);
        perturb_err = std::max(perturb_err, max_abs_diff(fp_adain, fp));

        GlobalStatsBank<double> bank(1);
        bank.seed(0, rand_tensor(Shape{c}, rng, -1.0, 1.0, false));
        auto fg = perturb_global(f, alpha, beta, bank, 0);
        // Same rescaling, with the running mean standing in for mu_o.
        std::vector<double> ref(shape[0] * c);
        for (std::size_t b = 0; b < shape[0]; ++b)
            for (std::size_t k = 0; k < c; ++k) ref[b * c + k] = bank.mu_datum(0).values()[k];
        D mu_ref(Shape{shape[0], c}, ref);
        auto fg_direct = add(mul(f, add_scalar(beta, 1.0)), mul(sub(alpha, beta), mu_ref));
        global_err = std::max(global_err, max_abs_diff(fg, fg_direct));

        auto ar = rand_tensor(Shape{shape[0], c}, rng, -0.8, 2.0, false);
        auto br = rand_tensor(Shape{shape[0], c}, rng, -0.8, 2.0, false);
        auto spp = channel_stats(fp, eps);
        ChannelStats<double> sr{mul(spp.mu, add_scalar(ar, 1.0)), mul(spp.sigma, add_scalar(br, 1.0)), eps};
        auto fr_adain = adain(fp, spp, sr);
        auto fr = rectify(fp, RectificationFactors<double>{ar, br});
        rect_err = std::max(rect_err, max_abs_diff(fr_adain, fr));
    }
    r.checks.push_back(bounded("perturbation: AdaIN form vs simplified form", perturb_err, 1e-10));
    r.checks.push_back(bounded("rectification: AdaIN form vs simplified form", rect_err, 1e-10));
    r.checks.push_back(bounded("global perturbation vs explicit running-mean form", global_err, 1e-10));
    return r;
}

SuiteReport suite_stats_oracle(std::uint64_t seed) {
    SuiteReport r{"stats-oracle", {}, 0.0};
    Rng rng(seed);
    double mu_err = 0.0;
    double sigma_err = 0.0;
    const double eps = kDefaultStatsEps;
    std::uniform_real_distribution<double> offset(-5.0, 5.0);
    for (int trial = 0; trial < 50; ++trial) {
        const Shape shape = random_shape(rng, 4, 8, 16);
        auto f = add_scalar(rand_tensor(shape, rng, -3.0, 3.0, false), offset(rng));
        auto st = channel_stats(f, eps);
        const std::size_t hw = shape[2] * shape[3];
        auto v = f.values();
        for (std::size_t b = 0; b < shape[0]; ++b)
            for (std::size_t c = 0; c < shape[1]; ++c) {
                const double* p = v.data() + (b * shape[1] + c) * hw;
                long double mean = 0.0L;
                for (std::size_t i = 0; i < hw; ++i) mean += p[i];
                mean /= static_cast<long double>(hw);
                long double var = 0.0L;
                for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
                var /= static_cast<long double>(hw);
                const long double sd = std::sqrt(var + static_cast<long double>(eps));
                const std::size_t k = b * shape[1] + c;
                mu_err = std::max(mu_err, static_cast<double>(std::abs(st.mu.values()[k] - mean)));
                sigma_err = std::max(sigma_err, static_cast<double>(std::abs(st.sigma.values()[k] - sd)));
            }
    }
    r.checks.push_back(bounded("channel mean vs loop oracle", mu_err, 1e-12));
    r.checks.push_back(bounded("channel std vs loop oracle", sigma_err, 1e-12));
    return r;
}

// Predictor that knows the perturbation and returns the exact inverse.
FactorPredictor<double> oracle_predictor(const PerturbFactors<double>& pf, const GlobalStatsBank<double>& bank,
                                         std::size_t stage) {
    return [pf, &bank, stage](const D& x) {
        const std::size_t b = x.dim(0);
        const std::size_t c = x.dim(1);
        auto inv = inverse_factors(pf.alpha, pf.beta, b);
        if (pf.mode != PerturbMode::Global) return inv;
        // mu of the pre-image: (mu_x - (alpha - beta) mu_datum) / (1 + beta)
        const auto stats = channel_stats(x, kDefaultStatsEps);
        auto mu_x = stats.mu.values();
        auto a = pf.alpha.values();
        auto be = pf.beta.values();
        auto md = bank.mu_datum(stage).values();
        std::vector<double> ar(b * c);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t k = 0; k < c; ++k) {
                const double mu_o = (mu_x[i * c + k] - (a[k] - be[k]) * md[k]) / (1.0 + be[k]);
                ar[i * c + k] = mu_o / mu_x[i * c + k] - 1.0;
            }
        return RectificationFactors<double>{D(Shape{b, c}, ar), inv.beta_rect};
    };
}

SuiteReport suite_cyclic(std::uint64_t seed) {
    SuiteReport r{"cyclic", {}, 0.0};
    Rng rng(seed);
    const double eps = kDefaultStatsEps;

    double stats_err = 0.0;
    double feat_err = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Shape shape = random_shape(rng, 4, 8, 16);
        const std::size_t c = shape[1];
        auto f = rand_tensor(shape, rng, 0.0, 2.0, false);
        auto alpha = rand_factor(c, rng);
        auto beta = rand_factor(c, rng);
        auto fp = perturb_local(f, alpha, beta);
        auto fr = rectify(fp, inverse_factors(alpha, beta, shape[0]));
        auto so = channel_stats(f, eps);
        auto sr = channel_stats(fr, eps);
        stats_err = std::max({stats_err, max_rel_diff(sr.mu, so.mu), max_rel_diff(sr.sigma, so.sigma)});
        feat_err = std::max(feat_err, max_rel_diff(fr, f));
    }
    r.checks.push_back(bounded("inverse factors restore channel statistics (relative)", stats_err, 1e-6));
    r.checks.push_back(bounded("inverse factors restore features (relative)", feat_err, 1e-6));

    double loss_local = 0.0;
    double loss_global = 0.0;
    const std::vector<std::size_t> channels{16, 32, 64};
    for (int trial = 0; trial < 20; ++trial) {
        for (PerturbMode mode : {PerturbMode::Local, PerturbMode::Global}) {
            std::uniform_int_distribution<std::size_t> shots(1, 5);
            const std::size_t batch = shots(rng) + 1;
            GlobalStatsBank<double> bank(channels.size());
            std::vector<StageStatsTrace<double>> traces;
            std::size_t size = 16;
            for (std::size_t s = 0; s < channels.size(); ++s, size /= 2) {
                auto f = rand_tensor(Shape{batch, channels[s], size, size}, rng, 0.0, 2.0, false);
                bank.seed(s, rand_tensor(Shape{channels[s]}, rng, 0.5, 1.5, false));
                PerturbFactors<double> pf{rand_factor(channels[s], rng), rand_factor(channels[s], rng), mode};
                auto cyc = cyclic_chain(f, pf, bank, s, oracle_predictor(pf, bank, s));
                traces.push_back({channel_stats(f, eps), channel_stats(cyc.rectified, eps), channel_stats(cyc.cycled, eps)});
            }
            auto logits = rand_tensor(Shape{1, 1, 8, 8}, rng, -3.0, 3.0, false);
            auto mask = binary_tensor(Shape{1, 1, 8, 8}, rng);
            auto losses = total_loss(logits, mask, traces, LossFlags{true, true});
            const double v = losses.l_cyc.item() + losses.l_align.item();
            (mode == PerturbMode::Local ? loss_local : loss_global) =
                std::max(mode == PerturbMode::Local ? loss_local : loss_global, v);
        }
    }
    r.checks.push_back(bounded("oracle adapter: L_cyc + L_align, local perturbation", loss_local, 1e-8));
    r.checks.push_back(bounded("oracle adapter: L_cyc + L_align, global perturbation", loss_global, 1e-8));
    return r;
}

SuiteReport suite_bank(std::uint64_t seed) {
    SuiteReport r{"bank", {}, 0.0};
    Rng rng(seed);
    for (double lambda : {0.9, 0.99}) {
        double worst = -INFINITY;  // max of |mu - m| - lambda^N |init - m|
        for (std::size_t n : {1, 2, 10, 50, 100}) {
            const std::size_t c = 8;
            auto init = rand_tensor(Shape{c}, rng, -3.0, 3.0, false);
            auto m = rand_tensor(Shape{c}, rng, -3.0, 3.0, false);
            GlobalStatsBank<double> bank(1, lambda);
            bank.seed(0, init);
            for (std::size_t i = 0; i < n; ++i) bank.update_mean(m, 0);
            const double decay = std::pow(lambda, static_cast<double>(n));
            for (std::size_t k = 0; k < c; ++k) {
                const double gap = std::abs(bank.mu_datum(0).values()[k] - m.values()[k]);
                const double bound = decay * std::abs(init.values()[k] - m.values()[k]);
                worst = std::max(worst, gap - bound);
            }
        }
        char name[64];
        std::snprintf(name, sizeof name, "constant updates contract by lambda^N (lambda=%g)", lambda);
        // Rounding slack of a few ulps on O(1) values.
        r.checks.push_back({name, std::max(worst, 0.0), 1e-12, worst <= 1e-12, {}});
    }
    return r;
}

// ---------------------------------------------------------------------------

void add_gradchecks(SuiteReport& r, std::uint64_t seed) {
    Rng rng(seed);
    GradcheckOptions opts;
    auto check = [&](const std::string& name, const ScalarFn& f, std::vector<D> inputs) {
        r.checks.push_back(gradcheck(name, f, std::move(inputs), opts));
    };

    const Shape s4{2, 3, 4, 5};
    {
        auto a = rand_tensor(s4, rng, -1, 1);
        auto b = rand_tensor(s4, rng, -1, 1);
        auto c = rand_tensor(Shape{3}, rng, -1, 1);
        auto bc = rand_tensor(Shape{2, 3}, rng, -1, 1);
        auto k = rand_tensor(Shape{1, 3, 1, 5}, rng, -1, 1);
        auto den = rand_tensor(s4, rng, 0.5, 1.5);
        auto den_c = rand_tensor(Shape{2, 3}, rng, 0.5, 1.5);
        auto p = make_probe(s4, rng);
        check("add", [=] { return p(add(a, b)); }, {a, b});
        check("add broadcast [C]", [=] { return p(add(a, c)); }, {a, c});
        check("sub broadcast [B,C]", [=] { return p(sub(a, bc)); }, {a, bc});
        check("mul broadcast same rank", [=] { return p(mul(a, k)); }, {a, k});
        check("mul broadcast [B,C]", [=] { return p(mul(bc, a)); }, {a, bc});
        check("div", [=] { return p(div(a, den)); }, {a, den});
        check("div broadcast [B,C]", [=] { return p(div(a, den_c)); }, {a, den_c});
        auto pb = make_probe(Shape{2, 3}, rng);
        auto cc = rand_tensor(Shape{3}, rng, 0.5, 1.5);
        check("div [B,C] by [C]", [=] { return pb(div(bc, cc)); }, {bc, cc});
        check("scale", [=] { return p(scale(a, 1.7)); }, {a});
        check("add_scalar", [=] { return p(add_scalar(a, -0.3)); }, {a});
    }
    {
        auto x = rand_away_from_zero(s4, rng, 0.05, 1.5);
        auto pos = rand_tensor(s4, rng, 0.2, 2.0);
        auto p = make_probe(s4, rng);
        check("relu", [=] { return p(relu(x)); }, {x});
        check("abs", [=] { return p(abs(x)); }, {x});
        check("sigmoid", [=] { return p(sigmoid(x)); }, {x});
        check("tanh", [=] { return p(tanh(x)); }, {x});
        check("square", [=] { return p(square(x)); }, {x});
        check("sqrt", [=] { return p(sqrt(pos)); }, {pos});
    }
    {
        auto x = rand_tensor(s4, rng, -1, 1);
        auto p13 = make_probe(Shape{3, 5}, rng);
        auto p02 = make_probe(Shape{2, 4}, rng);
        auto pbc = make_probe(Shape{2, 3}, rng);
        auto pr = make_probe(Shape{6, 20}, rng);
        auto pc = make_probe(Shape{2, 5, 4, 5}, rng);
        auto ps = make_probe(Shape{2, 3, 2, 5}, rng);
        auto y = rand_tensor(Shape{2, 2, 4, 5}, rng, -1, 1);
        check("sum", [=] { return sum(square(x)); }, {x});
        check("reduce_mean_all", [=] { return reduce_mean_all(square(x)); }, {x});
        check("sum_dims", [=] { return p13(sum_dims(x, {0, 2})); }, {x});
        check("mean_dims", [=] { return p02(mean_dims(x, {1, 3})); }, {x});
        check("reduce_mean_hw", [=] { return pbc(reduce_mean_hw(x)); }, {x});
        check("reshape", [=] { return pr(reshape(x, Shape{6, 20})); }, {x});
        check("concat", [=] { return pc(concat<double>({x, y}, 1)); }, {x, y});
        check("slice", [=] { return ps(slice(x, 2, 1, 2)); }, {x});
    }
    {
        auto x = rand_tensor(Shape{3, 5}, rng, -1, 1);
        auto w = rand_tensor(Shape{4, 5}, rng, -1, 1);
        auto b = rand_tensor(Shape{4}, rng, -1, 1);
        auto p = make_probe(Shape{3, 4}, rng);
        check("linear", [=] { return p(linear(x, w, b)); }, {x, w, b});
        check("linear without bias", [=] { return p(linear(x, w, D())); }, {x, w});
    }
    {
        auto x = rand_tensor(Shape{2, 3, 6, 5}, rng, -1, 1);
        auto w = rand_tensor(Shape{4, 3, 3, 3}, rng, -1, 1);
        auto b = rand_tensor(Shape{4}, rng, -1, 1);
        auto p1 = make_probe(Shape{2, 4, 6, 5}, rng);
        auto p2 = make_probe(Shape{2, 4, 2, 2}, rng);
        check("conv2d stride 1 pad 1", [=] { return p1(conv2d(x, w, b, 1, 1)); }, {x, w, b});
        check("conv2d stride 2 pad 0", [=] { return p2(conv2d(x, w, D(), 2, 0)); }, {x, w});
    }
    {
        auto x = rand_tensor(Shape{2, 3, 6, 4}, rng, -1, 1);
        auto p = make_probe(Shape{2, 3, 3, 2}, rng);
        check("avg pool", [=] { return p(pool2d(x, PoolKind::Average, 2)); }, {x});
        check("max pool", [=] { return p(pool2d(x, PoolKind::Max, 2)); }, {x});
        auto small = rand_tensor(Shape{1, 2, 3, 3}, rng, -1, 1);
        auto pu = make_probe(Shape{1, 2, 7, 5}, rng);
        check("bilinear upsample", [=] { return pu(upsample_bilinear(small, 7, 5)); }, {small});
        auto logits = rand_tensor(Shape{1, 1, 4, 4}, rng, -4, 4);
        auto target = binary_tensor(Shape{1, 1, 4, 4}, rng);
        check("bce with logits", [=] { return bce_with_logits(logits, target); }, {logits});
    }

    const double eps = kDefaultStatsEps;
    {
        auto f = rand_tensor(s4, rng, -1, 1);
        auto pm = make_probe(Shape{2, 3}, rng);
        auto ps = make_probe(Shape{2, 3}, rng);
        check("channel stats", [=] {
            auto st = channel_stats(f, eps);
            return add(pm(st.mu), ps(st.sigma));
        }, {f});
        auto src = rand_tensor(s4, rng, -1, 1);
        auto p = make_probe(s4, rng);
        check("adain", [=] { return p(adain(f, channel_stats(f, eps), channel_stats(src, eps))); }, {f, src});
        auto alpha = rand_tensor(Shape{3}, rng, -0.5, 0.5);
        auto beta = rand_tensor(Shape{3}, rng, -0.5, 0.5);
        check("local perturbation", [=] { return p(perturb_local(f, alpha, beta)); }, {f, alpha, beta});
        auto bank = std::make_shared<GlobalStatsBank<double>>(1);
        bank->seed(0, rand_tensor(Shape{3}, rng, -1, 1, false));
        check("global perturbation", [=] { return p(perturb_global(f, alpha, beta, *bank, 0)); }, {f, alpha, beta});
        auto ar = rand_tensor(Shape{2, 3}, rng, -0.5, 0.5);
        auto br = rand_tensor(Shape{2, 3}, rng, -0.5, 0.5);
        check("rectify", [=] { return p(rectify(f, RectificationFactors<double>{ar, br})); }, {f, ar, br});

        auto adapter = std::make_shared<RectAdapter<double>>(std::map<std::size_t, std::size_t>{{0, 8}}, AdapterOptions{}, rng);
        for (auto& t : adapter->parameters()) {
            auto v = t.mutable_values();
            std::uniform_real_distribution<double> u(-0.5, 0.5);
            for (auto& x : v) x = u(rng);
        }
        adapter->set_requires_grad(true);
        auto f8 = rand_tensor(Shape{2, 8, 4, 4}, rng, -1, 1);
        auto p8 = make_probe(Shape{2, 8, 4, 4}, rng);
        auto inputs = adapter->parameters();
        inputs.push_back(f8);
        check("adapter rectification", [=] { return p8(rectify_stage(f8, *adapter, 0, true)); }, inputs);

        auto g = rand_tensor(s4, rng, -1, 1);
        check("stats L1", [=] { return stats_l1(channel_stats(f, eps), channel_stats(g, eps)); }, {f, g});

        std::vector<D> chain_inputs = adapter->parameters();
        chain_inputs.push_back(f8);
        PerturbFactors<double> pf{rand_tensor(Shape{8}, rng, -0.5, 0.5, false), rand_tensor(Shape{8}, rng, -0.5, 0.5, false),
                                  PerturbMode::Local};
        auto bank8 = std::make_shared<GlobalStatsBank<double>>(1);
        bank8->seed(0, rand_tensor(Shape{8}, rng, -1, 1, false));
        auto logits = rand_tensor(Shape{1, 1, 4, 4}, rng, -2, 2);
        auto mask = binary_tensor(Shape{1, 1, 4, 4}, rng);
        chain_inputs.push_back(logits);
        for (PerturbMode mode : {PerturbMode::Local, PerturbMode::Global}) {
            pf.mode = mode;
            check(std::string("cyclic chain + total loss, ") + to_string(mode), [=] {
                auto cyc = cyclic_chain(f8, pf, *bank8, 0, *adapter);
                std::vector<StageStatsTrace<double>> tr{
                    {channel_stats(f8, eps), channel_stats(cyc.rectified, eps), channel_stats(cyc.cycled, eps)}};
                return total_loss(logits, mask, tr, LossFlags{true, true}).total;
            }, chain_inputs);
        }
    }
    {
        auto feats = rand_tensor(Shape{2, 4, 3, 3}, rng, -1, 1);
        std::vector<double> mv(2 * 6 * 6, 0.0);
        for (std::size_t i = 0; i < mv.size(); i += 3) mv[i] = 1.0;
        D masks(Shape{2, 1, 6, 6}, mv);
        auto pp = make_probe(Shape{4}, rng);
        check("masked prototype", [=] { return pp(masked_prototype(feats, masks)); }, {feats});
        auto q = rand_tensor(Shape{1, 4, 3, 3}, rng, -1, 1);
        auto proto = rand_tensor(Shape{4}, rng, -1, 1);
        auto pm = make_probe(Shape{1, 1, 3, 3}, rng);
        check("cosine matching", [=] { return pm(match(q, proto, 10.0)); }, {q, proto});
    }

    // Whole episode on a tiny configuration: 8x8 images, 4 channels.
    for (PerturbMode mode : {PerturbMode::Local, PerturbMode::Global}) {
        ModelOptions mo;
        mo.encoder.channels = {4, 4};
        mo.hooked_stages = {0, 1};
        auto model = std::make_shared<SegModel<double>>(mo, seed + 7);
        for (auto& t : model->adapter.parameters()) {
            auto v = t.mutable_values();
            std::uniform_real_distribution<double> u(-0.5, 0.5);
            for (auto& x : v) x = u(rng);
        }
        for (std::size_t s = 0; s < 2; ++s) model->bank.seed(s, rand_tensor(Shape{4}, rng, 0.1, 0.5, false));
        model->encoder.set_requires_grad(true);
        model->adapter.set_requires_grad(true);
        auto ep = std::make_shared<Episode<double>>();
        ep->id = "tiny";
        ep->support_images = rand_tensor(Shape{2, 3, 8, 8}, rng, 0, 1, false);
        std::vector<double> sm(2 * 64, 0.0);
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t y = 2; y < 6; ++y)
                for (std::size_t x = 1; x < 5; ++x) sm[k * 64 + y * 8 + x] = 1.0;
        ep->support_masks = D(Shape{2, 1, 8, 8}, sm);
        ep->query_image = rand_tensor(Shape{1, 3, 8, 8}, rng, 0, 1, false);
        ep->query_mask = binary_tensor(Shape{1, 1, 8, 8}, rng);
        auto cfg = std::make_shared<PerturbConfig>();
        cfg->p_local = mode == PerturbMode::Local ? 1.0 : 0.0;
        cfg->p_global = 1.0;
        cfg->stages = {0, 1};
        std::vector<D> inputs = model->encoder.parameters();
        for (auto& t : model->adapter.parameters()) inputs.push_back(t);
        const std::uint64_t episode_seed = seed + 11;
        check(std::string("full episode perturb-rectify-loss, ") + to_string(mode), [=] {
            Rng local(episode_seed);
            EpisodeContext<double> ctx;
            ctx.perturb = cfg.get();
            ctx.rng = &local;
            ctx.flags = LossFlags{true, true};
            SegModel<double> m = *model;
            return run_episode(*ep, m, EpisodeMode::AdapterTrain, ctx).losses->total;
        }, inputs);
    }
}

SuiteReport suite_gradcheck(std::uint64_t seed) {
    SuiteReport r{"gradcheck", {}, 0.0};
    add_gradchecks(r, seed);
    return r;
}

}  // namespace

bool SuiteReport::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

double SuiteReport::max_error() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, c.max_error);
    return m;
}

CheckResult gradcheck(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs,
                      const GradcheckOptions& opts) {
    CheckResult res{name, 0.0, opts.tolerance, false, {}};
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tape<double>::current().clear();
    auto loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) {
            auto g = t.grad();
            analytic.emplace_back(g.begin(), g.end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    NoGradGuard no_grad;
    auto eval = [&f] { return f().item(); };
    std::size_t total = 0;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto v = inputs[i].mutable_values();
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double x0 = v[j];
            const double h = opts.step * std::max(1.0, std::abs(x0));
            auto central = [&](double step) {
                v[j] = x0 + step;
                const double fp = eval();
                v[j] = x0 - step;
                const double fm = eval();
                v[j] = x0;
                return (fp - fm) / (2.0 * step);
            };
            const double num = central(h);
            const double half = central(h / 2.0);
            ++total;
            if (std::abs(num - half) > opts.kink_threshold * std::max(1.0, std::abs(num))) {
                ++skipped;
                continue;
            }
            const double a = analytic[i][j];
            const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opts.denominator_floor});
            res.max_error = std::max(res.max_error, rel);
        }
    }
    const double skip_fraction = total ? static_cast<double>(skipped) / total : 0.0;
    res.passed = res.max_error < opts.tolerance && skip_fraction <= opts.max_skip_fraction;
    std::ostringstream os;
    os << total << " coordinates";
    if (skipped) os << ", " << skipped << " skipped at kinks";
    res.detail = os.str();
    for (auto& t : inputs) t.zero_grad();
    return res;
}

std::vector<std::string> verify_suite_names() { return {"gradcheck", "algebra", "stats-oracle", "cyclic", "bank"}; }

SuiteReport run_verify_suite(const std::string& suite, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    SuiteReport r;
    if (suite == "gradcheck") {
        r = suite_gradcheck(seed);
    } else if (suite == "algebra") {
        r = suite_algebra(seed);
    } else if (suite == "stats-oracle") {
        r = suite_stats_oracle(seed);
    } else if (suite == "cyclic") {
        r = suite_cyclic(seed);
    } else if (suite == "bank") {
        r = suite_bank(seed);
    } else {
        throw std::invalid_argument("unknown verify suite '" + suite + "'");
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::string format_report(const SuiteReport& report) {
    std::ostringstream os;
    char line[256];
    for (const auto& c : report.checks) {
        std::snprintf(line, sizeof line, "  [%s] %-52s max_err=%.3e tol=%.1e", c.passed ? "ok" : "FAIL", c.name.c_str(),
                      c.max_error, c.tolerance);
        os << line;
        if (!c.detail.empty()) os << "  (" << c.detail << ")";
        os << '\n';
    }
    std::snprintf(line, sizeof line, "%s: %s (%zu checks, max_err=%.3e, %.2fs)\n", report.suite.c_str(),
                  report.passed() ? "PASS" : "FAIL", report.checks.size(), report.max_error(), report.seconds);
    os << line;
    return os.str();
}

}  // namespace stylebend
