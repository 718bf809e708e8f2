#include "ba2m/core/tape.hpp"

#include <numeric>

namespace ba2m {

template <typename T>
Var<T> Tape<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
    Node n;
    n.value = p.value;
    n.requires_grad = grad_enabled_;
    n.param = &p;
    return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                       std::string_view op, std::uint64_t flops) {
    require_finite(value, std::string(op));
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (const Var<T>& in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    costs_.push_back(OpCost{std::string(op), flops, scope_});
    return push(std::move(n));
}

template <typename T>
void Tape<T>::add_cost(std::string_view op, std::uint64_t flops) {
    costs_.push_back(OpCost{std::string(op), flops, scope_});
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T{0});
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
    if (root.tape != this) throw InputError("backward: root belongs to another tape");
    if (nodes_[root.id].value.numel() != 1)
        throw DimensionError("backward: root must hold a single element, got " +
                             nodes_[root.id].value.shape().to_string());
    if (!nodes_[root.id].requires_grad) return;
    grad_buffer(root.id)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        // The closure may touch other nodes' grads but never this node's buffer.
        n.backward(std::span<const T>(n.grad));
    }
    for (Node& n : nodes_) {
        if (n.param == nullptr || n.grad.empty()) continue;
        auto dst = n.param->grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
}

template <typename T>
std::uint64_t Tape<T>::total_flops() const {
    return std::accumulate(costs_.begin(), costs_.end(), std::uint64_t{0},
                           [](std::uint64_t acc, const OpCost& c) { return acc + c.flops; });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace ba2m
