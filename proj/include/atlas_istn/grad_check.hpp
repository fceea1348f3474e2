// Central finite-difference check of tape gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
};

// f must map the given inputs to a scalar. Every input is perturbed
// elementwise; relative error is |analytic - numeric| / max(1, |analytic|, |numeric|)
// so entries with vanishing gradients are judged on absolute error.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                           std::vector<Tensor<T>> inputs, double eps) {
    for (auto& x : inputs) {
        x.zero_grad();
        x.set_requires_grad(true);
    }
    backward(f(inputs));
    std::vector<std::vector<T>> analytic;
    for (auto& x : inputs) {
        analytic.emplace_back(x.numel(), T(0));
        if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.back().begin());
    }

    GradCheckResult r;
    NoGradGuard no_grad;
    std::size_t flat = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto values = inputs[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
            const T orig = values[i];
            values[i] = T(double(orig) + eps);
            const double fp = f(inputs).item();
            values[i] = T(double(orig) - eps);
            const double fm = f(inputs).item();
            values[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[k][i];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({1.0, std::abs(a), std::abs(numeric)});
            r.max_abs_error = std::max(r.max_abs_error, abs_err);
            if (rel > r.max_rel_error) {
                r.max_rel_error = rel;
                r.worst_index = flat;
            }
        }
    }
    return r;
}

}  // namespace atlas_istn
