#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ba2m/core/parameter.hpp"
#include "ba2m/core/tensor.hpp"

namespace ba2m {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// FLOPs attributed to one recorded op (one multiply-accumulate counts as 2).
/// `scope` is the dotted path of the scopes open when the op ran, e.g. "block1.ba2m.ags".
struct OpCost {
    std::string op;
    std::uint64_t flops = 0;
    std::string scope;
};

/// Reverse-mode tape. Ops append a node holding their output and an explicit backward
/// closure; backward() replays the closures in reverse recording order.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const T> grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    /// Names the ops recorded while alive; nested scopes join with '.'.
    class Scope {
    public:
        Scope(Tape& tape, std::string_view name) : tape_(tape), saved_(tape.scope_.size()) {
            if (!tape_.scope_.empty()) tape_.scope_ += '.';
            tape_.scope_ += name;
        }
        ~Scope() { tape_.scope_.resize(saved_); }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape& tape_;
        std::size_t saved_;
    };
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// A leaf that never receives a gradient.
    Var<T> constant(Tensor<T> value);
    /// A leaf whose gradient is kept for inspection after backward().
    Var<T> input(Tensor<T> value);
    /// A leaf bound to a Parameter; backward() accumulates into Parameter::grad.
    Var<T> parameter(Parameter<T>& p);

    /// Appends an op result. The backward closure is dropped when no input needs a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                  std::string_view op, std::uint64_t flops);

    /// Adds an op cost without producing a node (ops fused into another op's node).
    void add_cost(std::string_view op, std::uint64_t flops);

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool grad_enabled() const { return grad_enabled_; }

    /// Zero-initialised on first access. Only meaningful during or after backward().
    std::span<T> grad_buffer(std::size_t id);
    /// Empty span when the node received no gradient.
    std::span<const T> grad(Var<T> v) const { return nodes_[v.id].grad; }

    /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
    void backward(Var<T> root);

    const std::vector<OpCost>& costs() const { return costs_; }
    std::uint64_t total_flops() const;
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
    };

    Var<T> push(Node node);

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::vector<OpCost> costs_;
    std::string scope_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ba2m
