#pragma once

// Test-side oracles: brute-force loops and a finite-difference checker that
// share no code with the library beyond Tensor storage.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "stylebend/tensor.hpp"

namespace sbtest {

using stylebend::Shape;
using stylebend::Tensor;
using Rng = std::mt19937_64;

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = false) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(stylebend::shape_numel(shape));
    for (auto& x : v) x = d(rng);
    return Tensor<double>(shape, std::move(v), requires_grad);
}

inline Tensor<double> make(const Shape& shape, std::vector<double> v, bool requires_grad = false) {
    return Tensor<double>(shape, std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    return max_abs_diff(a.values(), b.values());
}

inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    return m;
}

// Direct 6-loop convolution (plus batch), zero padding.
inline std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias,
                                       std::size_t stride, std::size_t pad) {
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), k = w.dim(2);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    auto xv = x.values();
    auto wv = w.values();
    std::vector<double> out(B * Co * Ho * Wo, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double acc = bias ? bias->values()[o] : 0.0;
                    for (std::size_t c = 0; c < Ci; ++c)
                        for (std::size_t u = 0; u < k; ++u)
                            for (std::size_t v = 0; v < k; ++v) {
                                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                                acc += xv[((b * Ci + c) * H + yy) * W + xx] * wv[((o * Ci + c) * k + u) * k + v];
                            }
                    out[((b * Co + o) * Ho + i) * Wo + j] = acc;
                }
    return out;
}

struct LoopStats {
    std::vector<double> mu;
    std::vector<double> sigma;
};

// Two-pass mean / population variance per (b, c).
inline LoopStats stats_oracle(const Tensor<double>& f, double eps) {
    const std::size_t B = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
    auto v = f.values();
    LoopStats s;
    for (std::size_t p = 0; p < B * C; ++p) {
        double m = 0.0;
        for (std::size_t i = 0; i < HW; ++i) m += v[p * HW + i];
        m /= static_cast<double>(HW);
        double var = 0.0;
        for (std::size_t i = 0; i < HW; ++i) var += (v[p * HW + i] - m) * (v[p * HW + i] - m);
        var /= static_cast<double>(HW);
        s.mu.push_back(m);
        s.sigma.push_back(std::sqrt(var + eps));
    }
    return s;
}

// Long form of a channel re-styling: new_sigma * (F - mu) / sigma + new_mu,
// with per-(b,c) vectors.
inline std::vector<double> restyle_oracle(const Tensor<double>& f, const std::vector<double>& mu,
                                          const std::vector<double>& sigma, const std::vector<double>& new_mu,
                                          const std::vector<double>& new_sigma) {
    const std::size_t HW = f.dim(2) * f.dim(3);
    auto v = f.values();
    std::vector<double> out(v.size());
    for (std::size_t p = 0; p < mu.size(); ++p)
        for (std::size_t i = 0; i < HW; ++i)
            out[p * HW + i] = new_sigma[p] * (v[p * HW + i] - mu[p]) / sigma[p] + new_mu[p];
    return out;
}

struct FdResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

// Central differences with step h = step * max(1, |x|). Coordinates where the
// h and h/2 central estimates disagree (a kink inside the stencil) are
// skipped and counted.
inline FdResult finite_difference_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                        double step = 1e-6, double floor = 1e-4) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    auto loss = f();
    stylebend::backward(loss);
    FdResult r;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto vals = t.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double x0 = vals[i];
            const double h = step * std::max(1.0, std::abs(x0));
            auto eval = [&](double x) {
                vals[i] = x;
                stylebend::NoGradGuard guard;
                return f().item();
            };
            const double fp = eval(x0 + h);
            const double fm = eval(x0 - h);
            const double fh = eval(x0 + h / 2);
            const double fmh = eval(x0 - h / 2);
            vals[i] = x0;
            const double central = (fp - fm) / (2 * h);
            const double half = (fh - fmh) / h;
            if (std::abs(central - half) > 1e-5 * std::max(1.0, std::abs(central))) {
                ++r.skipped;
                continue;
            }
            const double err = std::abs(central - analytic[i]) / std::max({floor, std::abs(central), std::abs(analytic[i])});
            r.max_rel_error = std::max(r.max_rel_error, err);
            ++r.checked;
        }
    }
    return r;
}

}  // namespace sbtest
