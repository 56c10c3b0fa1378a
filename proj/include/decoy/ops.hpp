#pragma once

// Differentiable primitives. Every function returns a fresh Tensor and, when
// a Recording is active and any operand requires a gradient, records its
// backward kernel on the active tape.
//
// Broadcasting is limited to leading-axis expansion: an operand of shape
// [1, rest...] or [rest...] may pair with one of shape [n, rest...]. Every
// other coercion (row weights, channel repeats) is its own primitive.

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "decoy/tensor.hpp"

namespace decoy::ops {

namespace detail {

template <class T, class MakeKernel>
Tensor<T> emit(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
               MakeKernel&& make_kernel) {
    Tape<T>* tape = decoy::detail::active_tape<T>();
    bool need = tape && std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor<T>& t) { return t.requires_grad(); });
    Tensor<T> out(std::move(shape), std::move(data), need);
    if (need) tape->record(out, inputs, make_kernel());
    return out;
}

inline std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
    return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

// Layout of a possibly broadcast binary op: the larger operand has `reps`
// leading rows of `inner` values; a flag says which side repeats.
struct BroadcastPlan {
    Shape out_shape;
    std::size_t reps = 1;
    std::size_t inner = 0;
    bool a_repeats = false;
    bool b_repeats = false;
};

inline bool leading_expansion_of(const Shape& small, const Shape& big) {
    if (big.size() < 2) return false;
    Shape tail(big.begin() + 1, big.end());
    if (small == tail) return true;
    if (small.size() == big.size() && small[0] == 1 &&
        Shape(small.begin() + 1, small.end()) == tail)
        return true;
    return false;
}

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
    BroadcastPlan p;
    if (a == b) {
        p.out_shape = a;
        p.inner = numel_of(a);
    } else if (leading_expansion_of(b, a)) {
        p.out_shape = a;
        p.reps = a[0];
        p.inner = numel_of(b);
        p.b_repeats = true;
    } else if (leading_expansion_of(a, b)) {
        p.out_shape = b;
        p.reps = b[0];
        p.inner = numel_of(a);
        p.a_repeats = true;
    } else {
        throw ShapeError(shapes_msg(op, a, b));
    }
    return p;
}

enum class Binary { add, sub, mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
    auto p = plan_broadcast(name, a.shape(), b.shape());
    const std::size_t n = p.reps * p.inner;
    std::vector<T> out(n);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (std::size_t r = 0; r < p.reps; ++r) {
        const T* ra = pa + (p.a_repeats ? 0 : r * p.inner);
        const T* rb = pb + (p.b_repeats ? 0 : r * p.inner);
        T* ro = out.data() + r * p.inner;
        switch (kind) {
            case Binary::add:
                for (std::size_t i = 0; i < p.inner; ++i) ro[i] = ra[i] + rb[i];
                break;
            case Binary::sub:
                for (std::size_t i = 0; i < p.inner; ++i) ro[i] = ra[i] - rb[i];
                break;
            case Binary::mul:
                for (std::size_t i = 0; i < p.inner; ++i) ro[i] = ra[i] * rb[i];
                break;
        }
    }
    return emit<T>(p.out_shape, std::move(out), {a, b}, [=] {
        return [=](const T* g, T* const* gin) {
            const T* xa = a.ptr();
            const T* xb = b.ptr();
            for (std::size_t r = 0; r < p.reps; ++r) {
                const std::size_t oa = p.a_repeats ? 0 : r * p.inner;
                const std::size_t ob = p.b_repeats ? 0 : r * p.inner;
                const T* gr = g + r * p.inner;
                if (T* ga = gin[0]) {
                    if (kind == Binary::mul)
                        for (std::size_t i = 0; i < p.inner; ++i) ga[oa + i] += gr[i] * xb[ob + i];
                    else
                        for (std::size_t i = 0; i < p.inner; ++i) ga[oa + i] += gr[i];
                }
                if (T* gb = gin[1]) {
                    if (kind == Binary::mul)
                        for (std::size_t i = 0; i < p.inner; ++i) gb[ob + i] += gr[i] * xa[oa + i];
                    else if (kind == Binary::sub)
                        for (std::size_t i = 0; i < p.inner; ++i) gb[ob + i] -= gr[i];
                    else
                        for (std::size_t i = 0; i < p.inner; ++i) gb[ob + i] += gr[i];
                }
            }
        };
    });
}

template <class T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, detail::Binary::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, detail::Binary::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, detail::Binary::mul, "mul");
}

/// a * s + shift, elementwise.
template <class T>
Tensor<T> affine(const Tensor<T>& a, T s, T shift = T(0)) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s + shift;
    return detail::emit<T>(a.shape(), std::move(out), {a}, [=] {
        return [=, n = a.numel()](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i] * s;
        };
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return affine(a, s);
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return affine(a, T(1), s);
}

/// [m,k] x [k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError(detail::shapes_msg("matmul", a.shape(), b.shape()));
    std::vector<T> out(m * n, T(0));
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (std::size_t i = 0; i < m; ++i) {
        T* __restrict ro = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* __restrict rb = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) ro[j] += av * rb[j];
        }
    }
    return detail::emit<T>({m, n}, std::move(out), {a, b}, [=] {
        return [=](const T* g, T* const* gin) {
            const T* xa = a.ptr();
            const T* xb = b.ptr();
            if (T* ga = gin[0]) {
                // g * b^T with b transposed first so the inner loop is an axpy
                std::vector<T> bt(k * n);
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = xb[p * n + j];
                for (std::size_t i = 0; i < m; ++i) {
                    T* __restrict ra = ga + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T gv = g[i * n + j];
                        const T* __restrict rt = bt.data() + j * k;
                        for (std::size_t p = 0; p < k; ++p) ra[p] += gv * rt[p];
                    }
                }
            }
            if (T* gb = gin[1]) {
                for (std::size_t i = 0; i < m; ++i) {
                    const T* __restrict gr = g + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = xa[i * k + p];
                        T* __restrict rb = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) rb[j] += av * gr[j];
                    }
                }
            }
        };
    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank("transpose", a, 2);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return detail::emit<T>({n, m}, std::move(out), {a}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j * m + i];
        };
    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = s0;
        if (a.size() != b.size()) throw ShapeError(detail::shapes_msg("concat", s0, p.shape()));
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError(detail::shapes_msg("concat", s0, p.shape()));
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    std::vector<std::size_t> chunk(parts.size());
    std::size_t row = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        chunk[k] = parts[k].numel() / outer;
        row += chunk[k];
    }
    std::vector<T> out(outer * row);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * row;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::copy_n(parts[k].ptr() + o * chunk[k], chunk[k], out.begin() + off);
            off += chunk[k];
        }
    }
    return detail::emit<T>(out_shape, std::move(out), parts, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t o = 0; o < outer; ++o) {
                std::size_t off = o * row;
                for (std::size_t k = 0; k < chunk.size(); ++k) {
                    if (T* gk = gin[k])
                        for (std::size_t i = 0; i < chunk[k]; ++i) gk[o * chunk[k] + i] += g[off + i];
                    off += chunk[k];
                }
            }
        };
    });
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank() || begin >= end || end > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + to_string(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    const std::size_t src_row = a.dim(axis) * inner, len = (end - begin) * inner;
    std::vector<T> out(outer * len);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.ptr() + o * src_row + begin * inner, len, out.begin() + o * len);
    return detail::emit<T>(out_shape, std::move(out), {a}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < len; ++i) gin[0][o * src_row + begin * inner + i] += g[o * len + i];
        };
    });
}

/// [C] or [1,C] -> [n,C]
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& a, std::size_t n) {
    const std::size_t c = a.shape().back();
    if (a.numel() != c) throw ShapeError("broadcast_rows: expected a single row, got " + to_string(a.shape()));
    std::vector<T> out(n * c);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(a.ptr(), c, out.begin() + r * c);
    return detail::emit<T>({n, c}, std::move(out), {a}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gin[0][j] += g[r * c + j];
        };
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError(detail::shapes_msg("reshape", a.shape(), shape));
    std::vector<T> out(a.data().begin(), a.data().end());
    return detail::emit<T>(std::move(shape), std::move(out), {a}, [=, n = a.numel()] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i];
        };
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    return detail::emit<T>({1}, {s}, {a}, [=, n = a.numel()] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
        };
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError(detail::shapes_msg("mse", a.shape(), b.shape()));
    const std::size_t n = a.numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        T d = a[i] - b[i];
        s += d * d;
    }
    const T inv = T(1) / static_cast<T>(n);
    return detail::emit<T>({1}, {s * inv}, {a, b}, [=] {
        return [=](const T* g, T* const* gin) {
            const T k = T(2) * inv * g[0];
            for (std::size_t i = 0; i < n; ++i) {
                T d = a[i] - b[i];
                if (gin[0]) gin[0][i] += k * d;
                if (gin[1]) gin[1][i] -= k * d;
            }
        };
    });
}

/// sqrt(sum(a^2)); the gradient at the origin is taken as zero.
template <class T>
Tensor<T> l2_norm(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v * v;
    const T norm = std::sqrt(s);
    return detail::emit<T>({1}, {norm}, {a}, [=, n = a.numel()] {
        return [=](const T* g, T* const* gin) {
            if (norm == T(0)) return;
            const T k = g[0] / norm;
            for (std::size_t i = 0; i < n; ++i) gin[0][i] += k * a[i];
        };
    });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T x = a[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return detail::emit<T>(a.shape(), std::move(out), {a}, [=] {
        return [=, n = a.numel()](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i) {
                T x = a[i];
                T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                gin[0][i] += g[i] * (cdf + x * pdf);
            }
        };
    });
}

/// Normalizes over the last axis, then applies per-channel gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::size_t c = x.shape().back();
    if (gain.numel() != c || bias.numel() != c)
        throw ShapeError("layer_norm: input " + to_string(x.shape()) + " with gain " +
                         to_string(gain.shape()) + " and bias " + to_string(bias.shape()));
    const std::size_t rows = x.numel() / c;
    std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * c;
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(c);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            T h = (xr[j] - mu) * rstd[r];
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain[j] + bias[j];
        }
    }
    return detail::emit<T>(x.shape(), std::move(out), {x, gain, bias}, [&] {
        return [=, xhat = std::move(xhat), rstd = std::move(rstd)](const T* g, T* const* gin) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c;
                const T* hr = xhat.data() + r * c;
                if (gin[1])
                    for (std::size_t j = 0; j < c; ++j) gin[1][j] += gr[j] * hr[j];
                if (gin[2])
                    for (std::size_t j = 0; j < c; ++j) gin[2][j] += gr[j];
                if (T* gx = gin[0]) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < c; ++j) {
                        T dh = gr[j] * gain[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    for (std::size_t j = 0; j < c; ++j)
                        gx[r * c + j] += rstd[r] * (gr[j] * gain[j] - m1 - hr[j] * m2);
                }
            }
        };
    });
}

namespace detail {

template <class T>
Tensor<T> softmax_impl(const Tensor<T>& x, const Tensor<T>* bias, bool causal) {
    if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax over an empty axis");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    bool bias_repeats = false;
    if (bias) {
        if (bias->shape() == x.shape()) {
            bias_repeats = false;
        } else if (bias->numel() == n) {
            bias_repeats = true;
        } else {
            throw ShapeError(shapes_msg("softmax bias", x.shape(), bias->shape()));
        }
    }
    std::vector<T> y(x.numel(), T(0));
    std::vector<T> z(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t width = causal ? std::min(n, (r % n) + 1) : n;
        const T* xr = x.ptr() + r * n;
        const T* br = bias ? bias->ptr() + (bias_repeats ? 0 : r * n) : nullptr;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < width; ++j) {
            z[j] = br ? xr[j] + br[j] : xr[j];
            mx = std::max(mx, z[j]);
        }
        T s = 0;
        T* yr = y.data() + r * n;
        for (std::size_t j = 0; j < width; ++j) {
            yr[j] = std::exp(z[j] - mx);
            s += yr[j];
        }
        const T inv = T(1) / s;
        for (std::size_t j = 0; j < width; ++j) yr[j] *= inv;
    }
    std::vector<Tensor<T>> inputs{x};
    if (bias) inputs.push_back(*bias);
    Tensor<T> out = emit<T>(x.shape(), y, inputs, [&] {
        return [=, y = y](const T* g, T* const* gin) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * n;
                const T* gr = g + r * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < n; ++j) {
                    T dz = yr[j] * (gr[j] - dot);
                    if (gin[0]) gin[0][r * n + j] += dz;
                    if (bias && gin[1]) gin[1][(bias_repeats ? 0 : r * n) + j] += dz;
                }
            }
        };
    });
    return out;
}

}  // namespace detail

/// Softmax over the last axis, computed with row-max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    return detail::softmax_impl<T>(x, nullptr, false);
}

/// softmax(x + bias); bias matches x or is a single row shared by all rows.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, const Tensor<T>& bias) {
    return detail::softmax_impl<T>(x, &bias, false);
}

/// Row i of an [n,n] score matrix normalizes over columns 0..i only; the
/// remaining entries are exactly zero.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
    detail::require_rank("causal_softmax", x, 2);
    if (x.dim(0) != x.dim(1)) throw ShapeError("causal_softmax needs a square matrix, got " + to_string(x.shape()));
    return detail::softmax_impl<T>(x, nullptr, true);
}

/// Scales row i of an [n,C] tensor by w[i].
template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& w) {
    detail::require_rank("mul_rows", x, 2);
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (w.numel() != n) throw ShapeError(detail::shapes_msg("mul_rows", x.shape(), w.shape()));
    std::vector<T> out(n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * w[i];
    return detail::emit<T>({n, c}, std::move(out), {x, w}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    if (gin[0]) gin[0][i * c + j] += g[i * c + j] * w[i];
                    if (gin[1]) gin[1][i] += g[i * c + j] * x[i * c + j];
                }
        };
    });
}

/// Elementwise clamp; the gradient passes where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
    return detail::emit<T>(x.shape(), std::move(out), {x}, [=] {
        return [=, n = x.numel()](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < n; ++i)
                if (x[i] >= lo && x[i] <= hi) gin[0][i] += g[i];
        };
    });
}

/// Tokens laid out on a grid x grid raster; merges each 2x2 block by averaging.
template <class T>
Tensor<T> pool_tokens(const Tensor<T>& x, std::size_t grid) {
    detail::require_rank("pool_tokens", x, 2);
    if (grid % 2 != 0 || x.dim(0) != grid * grid)
        throw ShapeError("pool_tokens: " + to_string(x.shape()) + " is not a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " even token grid");
    const std::size_t c = x.dim(1), half = grid / 2;
    std::vector<T> out(half * half * c, T(0));
    for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t q = 0; q < grid; ++q) {
            const std::size_t dst = ((r / 2) * half + q / 2) * c, src = (r * grid + q) * c;
            for (std::size_t j = 0; j < c; ++j) out[dst + j] += T(0.25) * x[src + j];
        }
    return detail::emit<T>({half * half, c}, std::move(out), {x}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t r = 0; r < grid; ++r)
                for (std::size_t q = 0; q < grid; ++q) {
                    const std::size_t dst = ((r / 2) * half + q / 2) * c, src = (r * grid + q) * c;
                    for (std::size_t j = 0; j < c; ++j) gin[0][src + j] += T(0.25) * g[dst + j];
                }
        };
    });
}

/// Inverse-shape companion of pool_tokens: nearest-neighbour duplication of
/// a grid x grid raster onto a 2grid x 2grid raster.
template <class T>
Tensor<T> upsample_tokens(const Tensor<T>& x, std::size_t grid) {
    detail::require_rank("upsample_tokens", x, 2);
    if (x.dim(0) != grid * grid)
        throw ShapeError("upsample_tokens: " + to_string(x.shape()) + " is not a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " token grid");
    const std::size_t c = x.dim(1), big = grid * 2;
    std::vector<T> out(big * big * c);
    for (std::size_t r = 0; r < big; ++r)
        for (std::size_t q = 0; q < big; ++q)
            std::copy_n(x.ptr() + ((r / 2) * grid + q / 2) * c, c, out.begin() + (r * big + q) * c);
    return detail::emit<T>({big * big, c}, std::move(out), {x}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t r = 0; r < big; ++r)
                for (std::size_t q = 0; q < big; ++q) {
                    const std::size_t dst = ((r / 2) * grid + q / 2) * c, src = (r * big + q) * c;
                    for (std::size_t j = 0; j < c; ++j) gin[0][dst + j] += g[src + j];
                }
        };
    });
}

/// Row lookup: out[i] = table[ids[i]].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    detail::require_rank("embedding", table, 2);
    const std::size_t v = table.dim(0), k = table.dim(1);
    std::vector<T> out(ids.size() * k);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " + to_string(table.shape()));
        std::copy_n(table.ptr() + ids[i] * k, k, out.begin() + i * k);
    }
    return detail::emit<T>({ids.size(), k}, std::move(out), {table}, [=] {
        return [=](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < k; ++j) gin[0][ids[i] * k + j] += g[i * k + j];
        };
    });
}

/// [H,W,C] image -> [(H/p)(W/p), p*p*C] patch rows, each row ordered (dy, dx, c).
template <class T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t p) {
    detail::require_rank("patchify", img, 3);
    const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (h % p || w % p) throw ShapeError("patchify: " + to_string(img.shape()) + " not divisible by " + std::to_string(p));
    const std::size_t gw = w / p, row = p * p * c;
    std::vector<std::size_t> index(img.numel());  // output position -> input position
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < c; ++k) {
                std::size_t token = (y / p) * gw + x / p;
                std::size_t within = ((y % p) * p + x % p) * c + k;
                index[token * row + within] = (y * w + x) * c + k;
            }
    std::vector<T> out(img.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = img[index[i]];
    return detail::emit<T>({(h / p) * gw, row}, std::move(out), {img}, [&] {
        return [index = std::move(index)](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < index.size(); ++i) gin[0][index[i]] += g[i];
        };
    });
}

/// Inverse of patchify.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
    detail::require_rank("unpatchify", tokens, 2);
    const std::size_t gw = w / p, row = p * p * c;
    if (tokens.dim(0) != (h / p) * gw || tokens.dim(1) != row)
        throw ShapeError("unpatchify: " + to_string(tokens.shape()) + " does not tile " +
                         to_string(Shape{h, w, c}) + " with patch " + std::to_string(p));
    std::vector<std::size_t> index(tokens.numel());  // image position -> token position
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < c; ++k) {
                std::size_t token = (y / p) * gw + x / p;
                std::size_t within = ((y % p) * p + x % p) * c + k;
                index[(y * w + x) * c + k] = token * row + within;
            }
    std::vector<T> out(tokens.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = tokens[index[i]];
    return detail::emit<T>({h, w, c}, std::move(out), {tokens}, [&] {
        return [index = std::move(index)](const T* g, T* const* gin) {
            for (std::size_t i = 0; i < index.size(); ++i) gin[0][index[i]] += g[i];
        };
    });
}

}  // namespace decoy::ops
