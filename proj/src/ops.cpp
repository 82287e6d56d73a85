#include "stylebend/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace stylebend {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
using BackFn = std::function<void(detail::Node<T>&)>;

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
    for (const T v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> data, std::vector<NodePtr<T>> parents, BackFn<T> fn) {
    check_finite(data, op);
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs_grad = needs_grad || p->requires_grad;
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
        Tape<T>::current().record(node);
    }
    return Tensor<T>(node);
}

// Gradient buffer of parent i, or nullptr when that parent needs none.
template <typename T>
std::vector<T>* parent_grad(detail::Node<T>& self, std::size_t i) {
    auto& p = *self.parents[i];
    return p.requires_grad ? &p.grad_buffer() : nullptr;
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
    if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor argument");
}

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
    Shape out;
    std::array<std::size_t, 4> extent{};
    std::array<std::size_t, 4> stride_a{};
    std::array<std::size_t, 4> stride_b{};
};

// Brings a lower-rank operand to the rank of the other one.
Shape align_operand(const Shape& small, const Shape& big) {
    if (small.size() == big.size()) return small;
    if (shape_numel(small) == 1) return Shape(big.size(), 1);
    if (big.size() == 4 && small.size() == 1) return Shape{1, small[0], 1, 1};
    if (big.size() == 4 && small.size() == 2) return Shape{small[0], small[1], 1, 1};
    if (big.size() < 4) {
        Shape r(big.size() - small.size(), 1);
        r.insert(r.end(), small.begin(), small.end());
        return r;
    }
    throw DimensionError("cannot broadcast " + shape_str(small) + " against " + shape_str(big));
}

std::array<std::size_t, 4> pad4(const Shape& s) {
    std::array<std::size_t, 4> r{1, 1, 1, 1};
    const std::size_t off = 4 - s.size();
    for (std::size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
    return r;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    if (a.size() > 4 || b.size() > 4) throw DimensionError("broadcasting supports rank <= 4");
    Shape sa = a.size() < b.size() ? align_operand(a, b) : a;
    Shape sb = b.size() < a.size() ? align_operand(b, a) : b;
    BroadcastPlan plan;
    plan.out.resize(sa.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i] == sb[i] || sb[i] == 1) {
            plan.out[i] = sa[i];
        } else if (sa[i] == 1) {
            plan.out[i] = sb[i];
        } else {
            throw DimensionError("cannot broadcast " + shape_str(a) + " against " + shape_str(b));
        }
    }
    const auto ea = pad4(sa);
    const auto eb = pad4(sb);
    plan.extent = pad4(plan.out);
    std::size_t acc_a = 1;
    std::size_t acc_b = 1;
    for (int i = 3; i >= 0; --i) {
        plan.stride_a[i] = ea[i] == 1 ? 0 : acc_a;
        plan.stride_b[i] = eb[i] == 1 ? 0 : acc_b;
        acc_a *= ea[i];
        acc_b *= eb[i];
    }
    return plan;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < p.extent[0]; ++i0) {
        for (std::size_t i1 = 0; i1 < p.extent[1]; ++i1) {
            for (std::size_t i2 = 0; i2 < p.extent[2]; ++i2) {
                std::size_t oa = i0 * p.stride_a[0] + i1 * p.stride_a[1] + i2 * p.stride_a[2];
                std::size_t ob = i0 * p.stride_b[0] + i1 * p.stride_b[1] + i2 * p.stride_b[2];
                for (std::size_t i3 = 0; i3 < p.extent[3]; ++i3) {
                    fn(o++, oa, ob);
                    oa += p.stride_a[3];
                    ob += p.stride_b[3];
                }
            }
        }
    }
}

// f(x, y) -> out; da(x, y, out) and db(x, y, out) are the partials.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
    require_defined(a, op);
    require_defined(b, op);
    auto av = a.values();
    auto bv = b.values();
    if (a.shape() == b.shape()) {
        std::vector<T> out(av.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
        return finish<T>(op, a.shape(), std::move(out), {a.node(), b.node()}, [da, db](detail::Node<T>& self) {
            const auto& x = self.parents[0]->data;
            const auto& y = self.parents[1]->data;
            auto* gx = parent_grad(self, 0);
            auto* gy = parent_grad(self, 1);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const T g = self.grad[i];
                if (gx) (*gx)[i] += g * da(x[i], y[i], self.data[i]);
                if (gy) (*gy)[i] += g * db(x[i], y[i], self.data[i]);
            }
        });
    }
    const auto plan = plan_broadcast(a.shape(), b.shape());
    std::vector<T> out(shape_numel(plan.out));
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(av[ia], bv[ib]); });
    return finish<T>(op, plan.out, std::move(out), {a.node(), b.node()}, [plan, da, db](detail::Node<T>& self) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        auto* gx = parent_grad(self, 0);
        auto* gy = parent_grad(self, 1);
        for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            const T g = self.grad[o];
            if (gx) (*gx)[ia] += g * da(x[ia], y[ib], self.data[o]);
            if (gy) (*gy)[ib] += g * db(x[ia], y[ib], self.data[o]);
        });
    });
}

// f(x) -> out; df(x, out) is the derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, F f, DF df) {
    require_defined(a, op);
    auto av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return finish<T>(op, a.shape(), std::move(out), {a.node()}, [df](detail::Node<T>& self) {
        const auto& x = self.parents[0]->data;
        auto& gx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.data[i]);
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T, T y, T out) { return -out / y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return unary_op<T>("scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary_op<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary_op<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary_op<T>(
        "sigmoid", a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T s) { return s * (T(1) - s); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return unary_op<T>("tanh", a, [](T x) { return std::tanh(x); }, [](T, T t) { return T(1) - t * t; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return unary_op<T>(
        "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T r) { return r > T(0) ? T(0.5) / r : T(0); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    return unary_op<T>(
        "abs", a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return unary_op<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    require_defined(a, "sum");
    double acc = 0.0;
    for (const T v : a.values()) acc += v;
    return finish<T>("sum", Shape{1}, {static_cast<T>(acc)}, {a.node()}, [](detail::Node<T>& self) {
        auto& gx = self.parents[0]->grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gx) v += g;
    });
}

template <typename T>
Tensor<T> reduce_mean_all(const Tensor<T>& a) {
    require_defined(a, "reduce_mean_all");
    const std::size_t n = a.numel();
    if (n == 0) throw DimensionError("reduce_mean_all of empty tensor");
    double acc = 0.0;
    for (const T v : a.values()) acc += v;
    return finish<T>("reduce_mean_all", Shape{1}, {static_cast<T>(acc / static_cast<double>(n))}, {a.node()},
                     [n](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         const T g = self.grad[0] / static_cast<T>(n);
                         for (auto& v : gx) v += g;
                     });
}

namespace {

// Maps every input element to its output slot when `axes` are summed away.
struct ReducePlan {
    Shape out;
    std::array<std::size_t, 4> extent{};
    std::array<std::size_t, 4> out_stride{};
    std::size_t count = 1;
};

ReducePlan plan_reduce(const Shape& in, const std::vector<std::size_t>& axes) {
    if (in.size() > 4) throw DimensionError("reduction supports rank <= 4");
    std::vector<bool> reduced(in.size(), false);
    for (auto ax : axes) {
        if (ax >= in.size()) throw DimensionError("reduction axis out of range for " + shape_str(in));
        reduced[ax] = true;
    }
    ReducePlan p;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (reduced[i]) {
            p.count *= in[i];
        } else {
            p.out.push_back(in[i]);
        }
    }
    if (p.out.empty()) p.out.push_back(1);
    p.extent = pad4(in);
    const std::size_t off = 4 - in.size();
    std::size_t acc = 1;
    for (int i = 3; i >= 0; --i) {
        const bool is_reduced = i < static_cast<int>(off) || reduced[i - off];
        p.out_stride[i] = is_reduced ? 0 : acc;
        if (!is_reduced) acc *= p.extent[i];
    }
    return p;
}

template <typename Fn>
void for_each_reduce(const ReducePlan& p, Fn&& fn) {
    std::size_t i = 0;
    for (std::size_t i0 = 0; i0 < p.extent[0]; ++i0)
        for (std::size_t i1 = 0; i1 < p.extent[1]; ++i1)
            for (std::size_t i2 = 0; i2 < p.extent[2]; ++i2)
                for (std::size_t i3 = 0; i3 < p.extent[3]; ++i3)
                    fn(i++, i0 * p.out_stride[0] + i1 * p.out_stride[1] + i2 * p.out_stride[2] +
                                i3 * p.out_stride[3]);
}

template <typename T>
Tensor<T> reduce_axes(const char* op, const Tensor<T>& a, const std::vector<std::size_t>& axes, bool mean) {
    require_defined(a, op);
    const auto plan = plan_reduce(a.shape(), axes);
    if (mean && plan.count == 0) throw DimensionError(std::string(op) + ": empty reduction extent");
    const double norm = mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
    std::vector<double> acc(shape_numel(plan.out), 0.0);
    auto av = a.values();
    for_each_reduce(plan, [&](std::size_t i, std::size_t o) { acc[o] += av[i]; });
    std::vector<T> out(acc.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(acc[i] * norm);
    return finish<T>(op, plan.out, std::move(out), {a.node()}, [plan, norm](detail::Node<T>& self) {
        auto& gx = self.parents[0]->grad_buffer();
        const T s = static_cast<T>(norm);
        for_each_reduce(plan, [&](std::size_t i, std::size_t o) { gx[i] += self.grad[o] * s; });
    });
}

}  // namespace

template <typename T>
Tensor<T> sum_dims(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
    return reduce_axes("sum_dims", a, axes, false);
}

template <typename T>
Tensor<T> mean_dims(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
    return reduce_axes("mean_dims", a, axes, true);
}

template <typename T>
Tensor<T> reduce_mean_hw(const Tensor<T>& a) {
    require_defined(a, "reduce_mean_hw");
    if (a.rank() != 4) throw DimensionError("reduce_mean_hw expects [B,C,H,W], got " + shape_str(a.shape()));
    const std::size_t planes = a.dim(0) * a.dim(1);
    const std::size_t hw = a.dim(2) * a.dim(3);
    if (hw == 0) throw DimensionError("reduce_mean_hw: empty spatial extent");
    auto av = a.values();
    std::vector<T> out(planes);
    for (std::size_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        const T* src = av.data() + p * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
        out[p] = static_cast<T>(acc / static_cast<double>(hw));
    }
    return finish<T>("reduce_mean_hw", Shape{a.dim(0), a.dim(1)}, std::move(out), {a.node()},
                     [planes, hw](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         for (std::size_t p = 0; p < planes; ++p) {
                             const T g = self.grad[p] / static_cast<T>(hw);
                             T* dst = gx.data() + p * hw;
                             for (std::size_t i = 0; i < hw; ++i) dst[i] += g;
                         }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    auto av = a.values();
    return finish<T>("reshape", std::move(shape), std::vector<T>(av.begin(), av.end()), {a.node()},
                     [](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                     });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat axis out of range");
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> widths;
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) {
        require_defined(p, "concat");
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw DimensionError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(first));
        widths.push_back(s[axis] * inner);
        out_shape[axis] += s[axis];
        parents.push_back(p.node());
    }
    const std::size_t row = out_shape[axis] * inner;
    std::vector<T> out(outer * row);
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pv = parts[k].values();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * widths[k], widths[k], out.data() + o * row + col);
        }
        col += widths[k];
    }
    return finish<T>("concat", std::move(out_shape), std::move(out), std::move(parents),
                     [widths, outer, row](detail::Node<T>& self) {
                         std::size_t c = 0;
                         for (std::size_t k = 0; k < widths.size(); ++k) {
                             if (auto* g = parent_grad(self, k)) {
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < widths[k]; ++i)
                                         (*g)[o * widths[k] + i] += self.grad[o * row + c + i];
                             }
                             c += widths[k];
                         }
                     });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
    require_defined(a, "slice");
    const Shape& s = a.shape();
    if (axis >= s.size() || start + length > s[axis]) {
        throw DimensionError("slice out of range for " + shape_str(s));
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t in_row = s[axis] * inner;
    const std::size_t out_row = length * inner;
    const std::size_t offset = start * inner;
    Shape out_shape = s;
    out_shape[axis] = length;
    auto av = a.values();
    std::vector<T> out(outer * out_row);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(av.data() + o * in_row + offset, out_row, out.data() + o * out_row);
    return finish<T>("slice", std::move(out_shape), std::move(out), {a.node()},
                     [outer, in_row, out_row, offset](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < out_row; ++i)
                                 gx[o * in_row + offset + i] += self.grad[o * out_row + i];
                     });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_defined(x, "linear");
    require_defined(weight, "linear");
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(weight.shape()));
    }
    const std::size_t batch = x.dim(0);
    const std::size_t n_in = x.dim(1);
    const std::size_t n_out = weight.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != n_out)) {
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
    }
    auto xv = x.values();
    auto wv = weight.values();
    std::vector<T> out(batch * n_out);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t m = 0; m < n_out; ++m) {
            T acc = has_bias ? bias.values()[m] : T(0);
            for (std::size_t n = 0; n < n_in; ++n) acc += xv[b * n_in + n] * wv[m * n_in + n];
            out[b * n_out + m] = acc;
        }
    }
    std::vector<NodePtr<T>> parents{x.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return finish<T>("linear", Shape{batch, n_out}, std::move(out), std::move(parents),
                     [batch, n_in, n_out, has_bias](detail::Node<T>& self) {
                         const auto& xd = self.parents[0]->data;
                         const auto& wd = self.parents[1]->data;
                         auto* gx = parent_grad(self, 0);
                         auto* gw = parent_grad(self, 1);
                         auto* gb = has_bias ? parent_grad(self, 2) : nullptr;
                         for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t m = 0; m < n_out; ++m) {
                                 const T g = self.grad[b * n_out + m];
                                 if (gb) (*gb)[m] += g;
                                 for (std::size_t n = 0; n < n_in; ++n) {
                                     if (gx) (*gx)[b * n_in + n] += g * wd[m * n_in + n];
                                     if (gw) (*gw)[m * n_in + n] += g * xd[b * n_in + n];
                                 }
                             }
                         }
                     });
}

namespace {

struct ConvGeometry {
    std::size_t batch, c_in, height, width, c_out, kernel, stride, pad, out_h, out_w;
    std::size_t patch() const { return c_in * kernel * kernel; }
    std::size_t out_hw() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t hw = g.out_hw();
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                T* dst = col + ((c * g.kernel + ki) * g.kernel + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                            iw < static_cast<std::ptrdiff_t>(g.width);
                        dst[oh * g.out_w + ow] =
                            inside ? img[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)]
                                   : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t hw = g.out_hw();
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const T* src = col + ((c * g.kernel + ki) * g.kernel + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        img[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)] +=
                            src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
    require_defined(input, "conv2d");
    require_defined(weight, "conv2d");
    if (input.rank() != 4 || weight.rank() != 4 || weight.dim(1) != input.dim(1) || weight.dim(2) != weight.dim(3)) {
        throw DimensionError("conv2d: incompatible shapes " + shape_str(input.shape()) + " and " +
                             shape_str(weight.shape()));
    }
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                   stride,       pad,          0,            0};
    if (g.kernel > g.height + 2 * pad || g.kernel > g.width + 2 * pad) {
        throw DimensionError("conv2d: kernel larger than padded input");
    }
    g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
    g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
    }

    const std::size_t in_plane = g.c_in * g.height * g.width;
    const std::size_t out_plane = g.c_out * g.out_hw();
    std::vector<T> out(g.batch * out_plane);
    std::vector<T> col(g.patch() * g.out_hw());
    Eigen::Map<const RowMat<T>> w(weight.values().data(), g.c_out, g.patch());
    auto iv = input.values();
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(iv.data() + b * in_plane, g, col.data());
        Eigen::Map<const RowMat<T>> c(col.data(), g.patch(), g.out_hw());
        Eigen::Map<RowMat<T>> o(out.data() + b * out_plane, g.c_out, g.out_hw());
        o.noalias() = w * c;
        if (has_bias) {
            auto bv = bias.values();
            for (std::size_t co = 0; co < g.c_out; ++co) o.row(co).array() += bv[co];
        }
    }

    std::vector<NodePtr<T>> parents{input.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return finish<T>("conv2d", Shape{g.batch, g.c_out, g.out_h, g.out_w}, std::move(out), std::move(parents),
                     [g, has_bias, in_plane, out_plane](detail::Node<T>& self) {
                         auto* gx = parent_grad(self, 0);
                         auto* gw = parent_grad(self, 1);
                         auto* gb = has_bias ? parent_grad(self, 2) : nullptr;
                         const auto& xd = self.parents[0]->data;
                         Eigen::Map<const RowMat<T>> w(self.parents[1]->data.data(), g.c_out, g.patch());
                         std::vector<T> col(g.patch() * g.out_hw());
                         for (std::size_t b = 0; b < g.batch; ++b) {
                             Eigen::Map<const RowMat<T>> go(self.grad.data() + b * out_plane, g.c_out, g.out_hw());
                             if (gb) {
                                 // Plain loop: Eigen's vectorised sum peels by address, so its
                                 // rounding would depend on heap alignment.
                                 const T* gp = self.grad.data() + b * out_plane;
                                 for (std::size_t co = 0; co < g.c_out; ++co) {
                                     T acc = T(0);
                                     for (std::size_t i = 0; i < g.out_hw(); ++i) acc += gp[co * g.out_hw() + i];
                                     (*gb)[co] += acc;
                                 }
                             }
                             if (gw) {
                                 im2col(xd.data() + b * in_plane, g, col.data());
                                 Eigen::Map<const RowMat<T>> c(col.data(), g.patch(), g.out_hw());
                                 Eigen::Map<RowMat<T>> dw(gw->data(), g.c_out, g.patch());
                                 dw.noalias() += go * c.transpose();
                             }
                             if (gx) {
                                 Eigen::Map<RowMat<T>> dc(col.data(), g.patch(), g.out_hw());
                                 dc.noalias() = w.transpose() * go;
                                 col2im_add(col.data(), g, gx->data() + b * in_plane);
                             }
                         }
                     });
}

template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, std::size_t window) {
    require_defined(input, "pool2d");
    if (input.rank() != 4) throw DimensionError("pool2d expects [B,C,H,W], got " + shape_str(input.shape()));
    if (window == 0 || input.dim(2) < window || input.dim(3) < window) {
        throw DimensionError("pool2d: window does not fit input " + shape_str(input.shape()));
    }
    const std::size_t planes = input.dim(0) * input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    const std::size_t oh = h / window;
    const std::size_t ow = w / window;
    auto iv = input.values();
    std::vector<T> out(planes * oh * ow);
    std::vector<std::size_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(out.size());
    const T inv_area = T(1) / static_cast<T>(window * window);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = iv.data() + p * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const std::size_t o = (p * oh + y) * ow + x;
                if (kind == PoolKind::Average) {
                    T acc = T(0);
                    for (std::size_t dy = 0; dy < window; ++dy)
                        for (std::size_t dx = 0; dx < window; ++dx) acc += src[(y * window + dy) * w + x * window + dx];
                    out[o] = acc * inv_area;
                } else {
                    std::size_t best = (y * window) * w + x * window;
                    for (std::size_t dy = 0; dy < window; ++dy)
                        for (std::size_t dx = 0; dx < window; ++dx) {
                            const std::size_t idx = (y * window + dy) * w + x * window + dx;
                            if (src[idx] > src[best]) best = idx;
                        }
                    out[o] = src[best];
                    argmax[o] = p * h * w + best;
                }
            }
        }
    }
    return finish<T>("pool2d", Shape{input.dim(0), input.dim(1), oh, ow}, std::move(out), {input.node()},
                     [kind, argmax = std::move(argmax), planes, h, w, oh, ow, window, inv_area](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         if (kind == PoolKind::Max) {
                             for (std::size_t o = 0; o < self.grad.size(); ++o) gx[argmax[o]] += self.grad[o];
                             return;
                         }
                         for (std::size_t p = 0; p < planes; ++p)
                             for (std::size_t y = 0; y < oh; ++y)
                                 for (std::size_t x = 0; x < ow; ++x) {
                                     const T g = self.grad[(p * oh + y) * ow + x] * inv_area;
                                     for (std::size_t dy = 0; dy < window; ++dy)
                                         for (std::size_t dx = 0; dx < window; ++dx)
                                             gx[p * h * w + (y * window + dy) * w + x * window + dx] += g;
                                 }
                     });
}

namespace {

struct Interp {
    std::size_t lo, hi;
    double frac;
};

std::vector<Interp> interp_axis(std::size_t in, std::size_t out) {
    std::vector<Interp> r(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        r[i] = {lo, hi, src - static_cast<double>(lo)};
    }
    return r;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t height, std::size_t width) {
    require_defined(input, "upsample_bilinear");
    if (input.rank() != 4 || height == 0 || width == 0 || input.dim(2) == 0 || input.dim(3) == 0) {
        throw DimensionError("upsample_bilinear: bad shape " + shape_str(input.shape()));
    }
    const std::size_t planes = input.dim(0) * input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    auto ys = interp_axis(h, height);
    auto xs = interp_axis(w, width);
    auto iv = input.values();
    std::vector<T> out(planes * height * width);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = iv.data() + p * h * w;
        for (std::size_t y = 0; y < height; ++y) {
            const auto& iy = ys[y];
            for (std::size_t x = 0; x < width; ++x) {
                const auto& ix = xs[x];
                const T fy = static_cast<T>(iy.frac);
                const T fx = static_cast<T>(ix.frac);
                const T top = (T(1) - fx) * src[iy.lo * w + ix.lo] + fx * src[iy.lo * w + ix.hi];
                const T bot = (T(1) - fx) * src[iy.hi * w + ix.lo] + fx * src[iy.hi * w + ix.hi];
                out[(p * height + y) * width + x] = (T(1) - fy) * top + fy * bot;
            }
        }
    }
    return finish<T>("upsample_bilinear", Shape{input.dim(0), input.dim(1), height, width}, std::move(out),
                     {input.node()}, [ys, xs, planes, h, w, height, width](detail::Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         for (std::size_t p = 0; p < planes; ++p) {
                             T* dst = gx.data() + p * h * w;
                             for (std::size_t y = 0; y < height; ++y) {
                                 const auto& iy = ys[y];
                                 const T fy = static_cast<T>(iy.frac);
                                 for (std::size_t x = 0; x < width; ++x) {
                                     const auto& ix = xs[x];
                                     const T fx = static_cast<T>(ix.frac);
                                     const T g = self.grad[(p * height + y) * width + x];
                                     dst[iy.lo * w + ix.lo] += g * (T(1) - fy) * (T(1) - fx);
                                     dst[iy.lo * w + ix.hi] += g * (T(1) - fy) * fx;
                                     dst[iy.hi * w + ix.lo] += g * fy * (T(1) - fx);
                                     dst[iy.hi * w + ix.hi] += g * fy * fx;
                                 }
                             }
                         }
                     });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    require_defined(logits, "bce_with_logits");
    require_defined(targets, "bce_with_logits");
    if (logits.shape() != targets.shape()) {
        throw DimensionError("bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                             shape_str(targets.shape()));
    }
    const std::size_t n = logits.numel();
    if (n == 0) throw DimensionError("bce_with_logits of empty tensor");
    // Logit at which the sigmoid reaches the probability clamp.
    const double limit = std::log((1.0 - kBceProbFloor) / kBceProbFloor);
    auto zv = logits.values();
    auto yv = targets.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = std::clamp(static_cast<double>(zv[i]), -limit, limit);
        const double y = yv[i];
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    return finish<T>("bce_with_logits", Shape{1}, {static_cast<T>(acc / static_cast<double>(n))},
                     {logits.node(), targets.node()}, [n, limit](detail::Node<T>& self) {
                         const auto& zd = self.parents[0]->data;
                         const auto& yd = self.parents[1]->data;
                         auto* gz = parent_grad(self, 0);
                         auto* gy = parent_grad(self, 1);
                         const double g = static_cast<double>(self.grad[0]) / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                             const double z = zd[i];
                             const bool clamped = z <= -limit || z >= limit;
                             const double zc = std::clamp(z, -limit, limit);
                             if (gz && !clamped) {
                                 const double s = 1.0 / (1.0 + std::exp(-z));
                                 (*gz)[i] += static_cast<T>(g * (s - static_cast<double>(yd[i])));
                             }
                             if (gy) (*gy)[i] += static_cast<T>(-g * zc);
                         }
                     });
}

#define STYLEBEND_INSTANTIATE_OPS(T)                                                                        \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> scale(const Tensor<T>&, T);                                                          \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                     \
    template Tensor<T> relu(const Tensor<T>&);                                                              \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                           \
    template Tensor<T> tanh(const Tensor<T>&);                                                              \
    template Tensor<T> sqrt(const Tensor<T>&);                                                              \
    template Tensor<T> abs(const Tensor<T>&);                                                               \
    template Tensor<T> square(const Tensor<T>&);                                                            \
    template Tensor<T> sum(const Tensor<T>&);                                                               \
    template Tensor<T> reduce_mean_all(const Tensor<T>&);                                                   \
    template Tensor<T> sum_dims(const Tensor<T>&, const std::vector<std::size_t>&);                         \
    template Tensor<T> mean_dims(const Tensor<T>&, const std::vector<std::size_t>&);                        \
    template Tensor<T> reduce_mean_hw(const Tensor<T>&);                                                    \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                  \
    template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                      \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
    template Tensor<T> pool2d(const Tensor<T>&, PoolKind, std::size_t);                                     \
    template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t);                       \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

STYLEBEND_INSTANTIATE_OPS(float)
STYLEBEND_INSTANTIATE_OPS(double)

#undef STYLEBEND_INSTANTIATE_OPS

}  // namespace stylebend
