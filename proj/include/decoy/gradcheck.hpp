#pragma once

#include <cmath>
#include <functional>

#include "decoy/ops.hpp"

namespace decoy {

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|),
/// with the numeric derivative from central differences of step h.
///
/// `f` must map x to a scalar tensor deterministically; two bitwise-different
/// evaluations at the same point are rejected.
template <class T>
T check_gradient(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
    if (!(h > T(0))) throw ConfigError("check_gradient: step must be positive");

    Tensor<T> analytic;
    {
        Tape<T> tape;
        Tensor<T> leaf = x.with_grad();
        Tensor<T> y;
        {
            Recording<T> rec(tape);
            y = f(leaf);
        }
        if (y.numel() != 1) throw ShapeError("check_gradient: f must return a scalar, got " + to_string(y.shape()));
        if (y.requires_grad()) {
            tape.backward(y);
            analytic = tape.grad(leaf);
        } else {
            analytic = Tensor<T>::zeros(x.shape());
        }
    }

    NoGrad<T> off;
    auto eval = [&](const std::vector<T>& v) { return f(Tensor<T>(x.shape(), v)).item(); };
    std::vector<T> v(x.data().begin(), x.data().end());
    const T y0 = eval(v), y1 = eval(v);
    if (std::memcmp(&y0, &y1, sizeof(T)) != 0)
        throw Error("check_gradient: f is not deterministic");

    T worst = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const T saved = v[i];
        v[i] = saved + h;
        const T plus = eval(v);
        v[i] = saved - h;
        const T minus = eval(v);
        v[i] = saved;
        const T numeric = (plus - minus) / (T(2) * h);
        const T a = analytic[i];
        const T denom = std::max({T(1), std::abs(a), std::abs(numeric)});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace decoy
