#include "dbench/tensor.h"

#include <unordered_set>

#include "node.h"

namespace dbench {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
    return BasicTensor({}, {value});
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
    return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
    if (i >= rank()) throw IndexError("dim " + std::to_string(i) + " out of rank " + std::to_string(rank()));
    return node_->shape[i];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
    return node_->value.size();
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape()));
    return node_->shape[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape()));
    return node_->shape[1];
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
    return node_->value;
}

template <typename T>
std::span<T> BasicTensor<T>::data_mut() {
    return node_->value;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
T BasicTensor<T>::at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
    return node_->requires_grad;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
    return !node_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
    return node_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return BasicTensor(shape(), node_->value, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
    }
    return make_op<T>(std::move(new_shape), node_->value, {*this},
                      [](std::span<const T> g, std::span<std::span<T>> in) {
                          if (in[0].empty()) return;
                          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                      });
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
struct TensorAccess {
    static const std::shared_ptr<detail::Node<T>>& node(const BasicTensor<T>& t) { return t.node_; }
    static BasicTensor<T> wrap(std::shared_ptr<detail::Node<T>> n) { return BasicTensor<T>(std::move(n)); }
};

template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> value, std::vector<BasicTensor<T>> inputs,
                       BackwardFn<T> backward_fn) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (shape_numel(node->shape) != node->value.size()) throw DimensionError("make_op: value/shape mismatch");
    bool any = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(TensorAccess<T>::node(in));
        node->backward = std::move(backward_fn);
    }
    return TensorAccess<T>::wrap(std::move(node));
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    using Node = detail::Node<T>;
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    const auto& root = TensorAccess<T>::node(loss);
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += T(1);
    std::vector<std::span<T>> in_grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward) continue;
        in_grads.clear();
        for (auto& p : n->parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                in_grads.emplace_back(p->grad);
            } else {
                in_grads.emplace_back();
            }
        }
        n->backward(n->grad, in_grads);
    }
    // Interior gradients are not needed once propagated.
    for (Node* n : order) {
        if (n->backward) std::vector<T>().swap(n->grad);
    }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> make_op(Shape, std::vector<float>, std::vector<BasicTensor<float>>, BackwardFn<float>);
template BasicTensor<double> make_op(Shape, std::vector<double>, std::vector<BasicTensor<double>>, BackwardFn<double>);
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);

}  // namespace dbench
