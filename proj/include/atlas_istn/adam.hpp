#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "atlas_istn/params.hpp"

namespace atlas_istn {

template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    // First/second moments keyed by parameter name.
    std::map<std::string, std::vector<T>> m;
    std::map<std::string, std::vector<T>> v;
};

// lr0 * 2^(-epoch / half_life); a non-positive half-life disables decay.
inline double decayed_learning_rate(double lr0, double epoch, double half_life) {
    if (half_life <= 0.0) return lr0;
    return lr0 * std::exp2(-epoch / half_life);
}

// One bias-corrected Adam update over every parameter that received a
// gradient. Parameters never reached by backward() are left untouched.
template <class T>
void adam_step(const std::vector<ParamSet<T>*>& sets, AdamState<T>& state, double lr) {
    for (ParamSet<T>* set : sets)
        for (auto& [name, p] : *set) {
            if (!p.has_grad()) continue;
            for (T g : p.grad())
                if (!std::isfinite(g)) throw numeric_error("adam_step: non-finite gradient for parameter " + name);
        }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (ParamSet<T>* set : sets)
        for (auto& [name, p] : *set) {
            if (!p.has_grad()) continue;
            auto& m = state.m[name];
            auto& v = state.v[name];
            if (m.empty()) {
                m.assign(p.numel(), T(0));
                v.assign(p.numel(), T(0));
            }
            auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                const double mi = state.beta1 * double(m[i]) + (1.0 - state.beta1) * gi;
                const double vi = state.beta2 * double(v[i]) + (1.0 - state.beta2) * gi * gi;
                m[i] = T(mi);
                v[i] = T(vi);
                const double mhat = mi / c1, vhat = vi / c2;
                w[i] = T(double(w[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
            }
        }
}

template <class T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, double lr) {
    adam_step(std::vector<ParamSet<T>*>{&params}, state, lr);
}

}  // namespace atlas_istn
