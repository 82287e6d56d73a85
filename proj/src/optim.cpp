#include "stylebend/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace stylebend {

namespace {

template <typename T>
void check_hyper(T lr, T momentum) {
    if (!(lr > T(0))) throw std::invalid_argument("sgd: learning rate must be positive");
    if (!(momentum >= T(0) && momentum < T(1))) throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
}

}  // namespace

template <typename T>
void sgd_step(Tensor<T>& param, std::span<const T> grad, std::vector<T>& velocity, T lr, T momentum) {
    check_hyper(lr, momentum);
    if (grad.size() != param.numel()) {
        throw DimensionError("sgd: gradient size " + std::to_string(grad.size()) + " does not match parameter " +
                             shape_str(param.shape()));
    }
    if (velocity.empty()) velocity.assign(param.numel(), T(0));
    if (velocity.size() != param.numel()) throw DimensionError("sgd: velocity size mismatch");
    auto p = param.mutable_values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grad[i];
        p[i] -= lr * velocity[i];
    }
}

template <typename T>
SgdOptimizer<T>::SgdOptimizer(std::vector<Tensor<T>> params, T lr, T momentum)
    : params_(std::move(params)), velocity_(params_.size()), lr_(lr), momentum_(momentum) {
    check_hyper(lr, momentum);
}

template <typename T>
void SgdOptimizer<T>::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (p.has_grad()) {
            sgd_step<T>(p, p.grad(), velocity_[i], lr_, momentum_);
        } else {
            const std::vector<T> zero(p.numel(), T(0));
            sgd_step<T>(p, zero, velocity_[i], lr_, momentum_);
        }
    }
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template <typename T>
double SgdOptimizer<T>::clip_grad_norm(double max_norm) {
    if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& p : params_) {
        if (!p.has_grad()) continue;
        for (const T g : p.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T factor = static_cast<T>(max_norm / norm);
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (auto& g : p.node()->grad) g *= factor;
        }
    }
    return norm;
}

template void sgd_step<float>(Tensor<float>&, std::span<const float>, std::vector<float>&, float, float);
template void sgd_step<double>(Tensor<double>&, std::span<const double>, std::vector<double>&, double, double);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

}  // namespace stylebend
