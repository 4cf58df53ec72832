#pragma once

#include <functional>
#include <vector>

#include "capslab/tensor.hpp"

// Central-difference gradient oracle for validating tape backprop.

namespace capslab {

/// Numerically differentiate scalar f wrt every entry of every input tensor.
/// Returns one gradient tensor per input, same shapes as the inputs.
template <typename S>
std::vector<BasicTensor<S>> finite_difference_gradient(
    const std::function<S(const std::vector<BasicTensor<S>>&)>& f,
    std::vector<BasicTensor<S>> inputs, S h = S{1e-5}) {
    std::vector<BasicTensor<S>> grads;
    grads.reserve(inputs.size());
    for (const auto& in : inputs) grads.push_back(BasicTensor<S>::zeros(in.shape()));
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
            const S orig = inputs[t][i];
            inputs[t][i] = orig + h;
            const S fp = f(inputs);
            inputs[t][i] = orig - h;
            const S fm = f(inputs);
            inputs[t][i] = orig;
            grads[t][i] = (fp - fm) / (S{2} * h);
        }
    }
    return grads;
}

/// max over entries of |analytic - numeric| / (|numeric| + 1e-8)
template <typename S>
S max_relative_error(const BasicTensor<S>& analytic, const BasicTensor<S>& numeric) {
    if (!analytic.same_shape(numeric))
        throw ShapeError("max_relative_error: " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
    S worst{0};
    for (std::size_t i = 0; i < analytic.numel(); ++i) {
        const S rel = std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + S{1e-8});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace capslab
