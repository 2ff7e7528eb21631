#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vxda {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node;

// Backward callback: reads self.grad, accumulates into self.parents.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node<T>>> parents;
    BackwardFn<T> backward;
    std::uint64_t seq = 0;  // creation order; parents always have smaller seq

    std::vector<T>& ensure_grad();
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A BasicTensor is a cheap handle; copies share the same node. Results of
/// ops on tensors that require grad record their parents and a backward
/// callback, forming a DAG that backward() walks in reverse creation order.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    static BasicTensor zeros(Shape shape);
    static BasicTensor full(Shape shape, T value);
    static BasicTensor from(Shape shape, std::vector<T> values);
    static BasicTensor scalar(T value);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<const T> data() const { return node_->data; }
    // Only for leaves: optimizer updates, running statistics, test setup.
    std::span<T> mutable_data();

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    BasicTensor& set_requires_grad(bool flag);
    bool is_leaf() const { return node_->parents.empty(); }
    std::string_view op() const { return node_->op; }

    T item() const;
    void backward() const;
    BasicTensor detach() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    template <typename U>
    BasicTensor<U> cast() const;

private:
    explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<Node<T>> node_;

    template <typename U>
    friend BasicTensor<U> make_op(Shape, std::vector<U>, std::string_view,
                                  std::vector<BasicTensor<U>>, BackwardFn<U>);
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Builds an op result. The backward callback and parent edges are recorded
/// only when grad mode is on and some input requires grad.
template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> values, std::string_view op,
                       std::vector<BasicTensor<T>> inputs, BackwardFn<T> backward);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

// Accumulates src into dst elementwise.
template <typename T>
void accumulate(std::vector<T>& dst, std::span<const T> src);

}  // namespace vxda
