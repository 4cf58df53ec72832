#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

class AutodiffError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using VarId = std::uint32_t;

template <typename S>
class BasicTape;

/// Handle to a value recorded on a tape.
template <typename S>
struct BasicVar {
    BasicTape<S>* tape = nullptr;
    VarId id = 0;

    const BasicTensor<S>& value() const { return tape->value(id); }
    const BasicTensor<S>& grad() const { return tape->grad(id); }
};

/// Ordered record of primitive operations. Replaying it in reverse visits every
/// recorded operation exactly once; a value consumed k times receives the sum of
/// k partial gradient contributions.
template <typename S>
class BasicTape {
public:
    using TensorT = BasicTensor<S>;
    using Var = BasicVar<S>;
    using Backprop = std::function<void(BasicTape&, VarId)>;

    Var leaf(TensorT v) { return push(std::move(v), {}, nullptr); }
    Var constant(TensorT v) { return push(std::move(v), {}, nullptr); }

    Var record(TensorT value, std::vector<VarId> inputs, Backprop backprop) {
        return push(std::move(value), std::move(inputs), std::move(backprop));
    }

    const TensorT& value(VarId id) const { return nodes_[id].value; }

    /// Gradient of the last backward() w.r.t. node `id`; zeros if it did not participate.
    const TensorT& grad(VarId id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }

    TensorT& grad_buf(VarId id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }

    bool grad_allocated(VarId id) const { return !nodes_[id].grad.empty(); }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar terminal with seed 1.
    void backward(Var loss) {
        if (nodes_.empty()) throw AutodiffError("backward on an empty tape");
        if (loss.tape != this) throw AutodiffError("backward: loss var belongs to another tape");
        if (value(loss.id).numel() != 1)
            throw AutodiffError("backward requires a scalar terminal, got shape " +
                                shape_str(value(loss.id).shape()));
        grad_buf(loss.id).fill(S{1});
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backprop) continue;
            if (n.grad.empty()) continue;  // zero adjoint, nothing to propagate
            n.backprop(*this, static_cast<VarId>(i));
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        TensorT value;
        TensorT grad;  // allocated on first touch, zero-filled
        std::vector<VarId> inputs;
        Backprop backprop;
    };

    Var push(TensorT value, std::vector<VarId> inputs, Backprop backprop) {
        nodes_.push_back(Node{std::move(value), TensorT{}, std::move(inputs), std::move(backprop)});
        return Var{this, static_cast<VarId>(nodes_.size() - 1)};
    }

    void ensure_grad(VarId id) {
        Node& n = nodes_[id];
        if (n.grad.empty() && n.value.numel() > 0) n.grad = TensorT(n.value.shape());
    }

    std::vector<Node> nodes_;
};

using Tape = BasicTape<Real>;
using Var = BasicVar<Real>;

}  // namespace capslab
