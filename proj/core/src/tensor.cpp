#include "vxda/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace vxda {

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_seq = 0;
}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto extent : shape) {
        n *= extent;
    }
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
std::vector<T>& Node<T>::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
}

template <typename T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
    if (dst.empty()) {
        dst.assign(src.begin(), src.end());
        return;
    }
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

namespace {

template <typename T>
std::shared_ptr<Node<T>> new_node(Shape shape, std::vector<T> values) {
    for (auto extent : shape) {
        if (extent <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->seq = g_next_seq++;
    return node;
}

}  // namespace

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
    auto n = vxda::numel(shape);
    return BasicTensor(new_node<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), T(0))));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
    auto n = vxda::numel(shape);
    return BasicTensor(new_node<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), value)));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values) {
    return BasicTensor(new_node<T>(std::move(shape), std::move(values)));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
    return BasicTensor(new_node<T>(Shape{}, std::vector<T>{value}));
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!node_->parents.empty()) {
        throw std::logic_error("mutable_data() is only available on leaf tensors");
    }
    return node_->data;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
    if (!is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
    return *this;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (node_->data.size() != 1) {
        throw ShapeError("item() requires a single-element tensor, got shape " + to_string(shape()));
    }
    return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return BasicTensor(new_node<T>(node_->shape, node_->data));
}

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
    std::vector<U> values(node_->data.begin(), node_->data.end());
    return BasicTensor<U>::from(node_->shape, std::move(values));
}

template <typename T>
void BasicTensor<T>::backward() const {
    if (node_->data.size() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + to_string(shape()));
    }
    if (!node_->requires_grad) {
        throw std::logic_error("backward() on a tensor that is not part of a graph");
    }

    // Collect every node reachable from the loss, then run in reverse creation order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    if (node_->parents.empty()) {
        accumulate<T>(node_->grad, std::vector<T>{T(1)});
    } else {
        node_->grad.assign(1, T(1));
    }

    for (auto* n : order) {
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Intermediate grads are not retained; leaves keep theirs.
    for (auto* n : order) {
        if (!n->parents.empty()) std::vector<T>().swap(n->grad);
    }
}

template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> values, std::string_view op,
                       std::vector<BasicTensor<T>> inputs, BackwardFn<T> backward) {
    auto node = new_node<T>(std::move(shape), std::move(values));
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return BasicTensor<T>(std::move(node));
}

template struct Node<float>;
template struct Node<double>;
template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;
template void accumulate<float>(std::vector<float>&, std::span<const float>);
template void accumulate<double>(std::vector<double>&, std::span<const double>);
template BasicTensor<float> make_op<float>(Shape, std::vector<float>, std::string_view,
                                           std::vector<BasicTensor<float>>, BackwardFn<float>);
template BasicTensor<double> make_op<double>(Shape, std::vector<double>, std::string_view,
                                             std::vector<BasicTensor<double>>, BackwardFn<double>);

}  // namespace vxda
