#include "stylebend/tensor.hpp"

#include <cmath>
#include <sstream>

namespace stylebend {

namespace {
thread_local int g_no_grad_depth = 0;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("element count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    for (const T v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const detail::Node<T>& Tensor<T>::checked() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    return checked().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
    const auto& s = shape();
    if (i >= s.size()) throw DimensionError("dimension index out of range for " + shape_str(s));
    return s[i];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
    return checked().data.size();
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
    return checked().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
    checked();
    return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
    return checked().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    checked();
    node_->requires_grad = on;
}

template <typename T>
bool Tensor<T>::has_grad() const {
    return !checked().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    return checked().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    checked();
    node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    const auto& n = checked();
    auto out = std::make_shared<detail::Node<T>>();
    out->shape = n.shape;
    out->data = n.data;
    return Tensor(std::move(out));
}

template <typename T>
Tape<T>& Tape<T>::current() {
    thread_local Tape tape;
    return tape;
}

template <typename T>
void Tape<T>::clear() {
    for (auto& n : ops_) {
        n->parents.clear();
        n->backward_fn = nullptr;
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
    ops_.clear();
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
    if (loss.numel() != 1) {
        throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw std::logic_error("backward without a recorded forward pass: loss does not require grad");
    }
    auto& root = *loss.node();
    const bool root_is_leaf = root.backward_fn == nullptr;
    if (ops_.empty() && !root_is_leaf) {
        throw std::logic_error("backward without a recorded forward pass: tape is empty");
    }
    root.grad_buffer()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        auto& node = **it;
        if (node.grad.empty() || !node.backward_fn) continue;
        node.backward_fn(node);
    }
    clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace stylebend
