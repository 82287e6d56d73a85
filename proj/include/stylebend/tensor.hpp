#pragma once

// Dense tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding shape, values and (lazily)
// gradients. Ops that consume a tensor requiring gradients record their
// output node on the thread-local Tape of the matching precision; backward()
// walks that record in reverse and then clears it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylebend {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    // Zero-filled gradient buffer, allocated on first use.
    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;

    std::span<const T> values() const;
    // Direct write access; intended for leaves (parameters, inputs).
    std::span<T> mutable_values();
    T item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const T> grad() const;
    void zero_grad();

    // Value copy with no history and no gradient requirement.
    Tensor detach() const;

    const NodePtr& node() const { return node_; }

private:
    const detail::Node<T>& checked() const;
    NodePtr node_;
};

template <typename T>
class Tape {
public:
    static Tape& current();

    void record(std::shared_ptr<detail::Node<T>> node) { ops_.push_back(std::move(node)); }
    std::size_t size() const { return ops_.size(); }
    bool empty() const { return ops_.empty(); }

    // Drops the record and breaks the recorded graph.
    void clear();

    // Seeds d(loss)/d(loss) = 1 and propagates to every leaf requiring
    // gradients. Leaf gradients accumulate; the tape is consumed.
    void backward(const Tensor<T>& loss);

private:
    std::vector<std::shared_ptr<detail::Node<T>>> ops_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>::current().backward(loss);
}

// Whether new ops record history on this thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    auto src = t.values();
    std::vector<To> out(src.begin(), src.end());
    return Tensor<To>(t.shape(), std::move(out));
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace stylebend
