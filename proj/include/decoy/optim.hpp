#pragma once

#include <cmath>
#include <cstdint>

#include "decoy/tensor.hpp"

namespace decoy {

template <class T>
struct AdamConfig {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <class T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::int64_t step = 0;
};

/// One bias-corrected adaptive-moment update. Returns the new parameter
/// values; each keeps the requires_grad flag of its predecessor.
template <class T>
std::vector<Tensor<T>> adam_step(const std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                                 AdamState<T>& state, T lr, const AdamConfig<T>& cfg = {}) {
    if (params.size() != grads.size())
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), T(0));
            state.v.emplace_back(p.numel(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k)
        if (params[k].shape() != grads[k].shape() || state.m[k].size() != params[k].numel())
            throw ShapeError("adam_step: param " + to_string(params[k].shape()) + " vs grad " +
                             to_string(grads[k].shape()));

    ++state.step;
    const T c1 = T(1) - std::pow(cfg.beta1, static_cast<T>(state.step));
    const T c2 = T(1) - std::pow(cfg.beta2, static_cast<T>(state.step));
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = state.m[k];
        auto& v = state.v[k];
        std::vector<T> p(params[k].data().begin(), params[k].data().end());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T g = grads[k][i];
            m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g * g;
            const T mhat = m[i] / c1;
            const T vhat = v[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        out.emplace_back(params[k].shape(), std::move(p), params[k].requires_grad());
    }
    return out;
}

}  // namespace decoy
