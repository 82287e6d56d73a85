#pragma once

#include <span>
#include <vector>

#include "stylebend/tensor.hpp"

namespace stylebend {

// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v.
template <typename T>
void sgd_step(Tensor<T>& param, std::span<const T> grad, std::vector<T>& velocity, T lr, T momentum);

template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor<T>> params, T lr, T momentum);

    // Parameters that received no gradient since the last zero_grad() step
    // with g = 0.
    void step();
    void zero_grad();
    // Rescales all gradients so that their joint L2 norm is at most
    // max_norm. Returns the norm before clipping.
    double clip_grad_norm(double max_norm);

    T lr() const { return lr_; }
    T momentum() const { return momentum_; }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    T lr_;
    T momentum_;
};

extern template class SgdOptimizer<float>;
extern template class SgdOptimizer<double>;

}  // namespace stylebend
