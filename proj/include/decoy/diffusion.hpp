#pragma once

// Forward noising, the fixed linear latent codec, and assembly of the
// inpainting context fed to the noise predictor.

#include <cmath>
#include <map>
#include <optional>

#include "decoy/ops.hpp"
#include "decoy/random.hpp"

namespace decoy {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kPatch = 2;
inline constexpr std::size_t kLatentSide = kImageSide / kPatch;
inline constexpr std::size_t kLatentTokens = kLatentSide * kLatentSide;
inline constexpr std::size_t kLatentChannels = 8;

struct NoiseSchedule {
    std::size_t steps = 100;  // T
    double beta_start = 1e-4;
    double beta_end = 0.2;
    std::vector<double> betas;       // index t-1
    std::vector<double> alpha_bars;  // index t-1

    static NoiseSchedule linear(std::size_t steps = 100, double beta_start = 1e-4, double beta_end = 0.2) {
        if (steps < 1) throw ConfigError("noise schedule needs at least one step");
        if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
            throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1");
        NoiseSchedule s;
        s.steps = steps;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        double prod = 1.0;
        for (std::size_t i = 0; i < steps; ++i) {
            double b = steps == 1 ? beta_start
                                  : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                                     static_cast<double>(steps - 1);
            prod *= 1.0 - b;
            s.betas.push_back(b);
            s.alpha_bars.push_back(prod);
        }
        return s;
    }

    void check(std::size_t t) const {
        if (t < 1 || t > steps)
            throw ConfigError("timestep " + std::to_string(t) + " outside [1," + std::to_string(steps) + "]");
    }

    /// Cumulative alpha at t; t = 0 is the clean end (1).
    double alpha_bar(std::size_t t) const {
        if (t == 0) return 1.0;
        check(t);
        return alpha_bars[t - 1];
    }
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <class T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps) {
    s.check(t);
    if (z0.shape() != eps.shape())
        throw ShapeError("q_sample: latent " + to_string(z0.shape()) + " vs noise " + to_string(eps.shape()));
    const double ab = s.alpha_bar(t);
    return ops::add(ops::scale(z0, static_cast<T>(std::sqrt(ab))), ops::scale(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

/// Linear map between 2x2x3 pixel patches and 8-dim latent tokens:
/// orthonormal columns followed by a per-channel gain, so decode (transpose,
/// gain inverted) is the pseudo-inverse of encode. The first three columns are
/// the per-channel patch means (flat colour patches round-trip exactly); the
/// rest come from a seeded Gaussian, orthonormalized against them, and carry
/// sub-patch detail. `detail_gain` scales those five channels toward unit
/// variance on the corpus, the role of a latent scaling factor.
template <class T>
struct LatentCodec {
    Tensor<T> enc;  // [12, 8], gain folded in
    Tensor<T> dec;  // [8, 12]

    static LatentCodec make(std::uint64_t seed, double detail_gain = 1.0) {
        if (!(detail_gain > 0)) throw ConfigError("codec detail gain must be positive");
        constexpr std::size_t in = kPatch * kPatch * kImageChannels;
        std::vector<std::vector<double>> cols;
        for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
            std::vector<double> v(in, 0.0);
            for (std::size_t p = 0; p < kPatch * kPatch; ++p) v[p * kImageChannels + ch] = 0.5;
            cols.push_back(v);
        }
        Rng rng = make_rng(seed, 0xC0DEC);
        std::normal_distribution<double> nd;
        while (cols.size() < kLatentChannels) {
            std::vector<double> v(in);
            for (auto& x : v) x = nd(rng);
            for (const auto& c : cols) {
                double dot = 0;
                for (std::size_t i = 0; i < in; ++i) dot += v[i] * c[i];
                for (std::size_t i = 0; i < in; ++i) v[i] -= dot * c[i];
            }
            double norm = 0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-6) continue;
            for (auto& x : v) x /= norm;
            cols.push_back(v);
        }
        std::vector<T> e(in * kLatentChannels), d(kLatentChannels * in);
        for (std::size_t i = 0; i < in; ++i)
            for (std::size_t j = 0; j < kLatentChannels; ++j) {
                const double g = j < kImageChannels ? 1.0 : detail_gain;
                e[i * kLatentChannels + j] = static_cast<T>(cols[j][i] * g);
                d[j * in + i] = static_cast<T>(cols[j][i] / g);
            }
        return {Tensor<T>({in, kLatentChannels}, std::move(e)), Tensor<T>({kLatentChannels, in}, std::move(d))};
    }

    /// [16,16,3] image -> [64,8] latent
    Tensor<T> encode(const Tensor<T>& img) const { return ops::matmul(ops::patchify(img, kPatch), enc); }

    /// [64,8] latent -> [16,16,3] image (not clipped)
    Tensor<T> decode(const Tensor<T>& z) const {
        return ops::unpatchify(ops::matmul(z, dec), kImageSide, kImageSide, kImageChannels, kPatch);
    }
};

/// 2x2 average of the keep-mask thresholded at 0.5; ties keep. Returns 64 values.
template <class T>
std::vector<T> downsample_mask(const Tensor<T>& mask) {
    if (mask.shape() != Shape{kImageSide, kImageSide})
        throw ShapeError("mask must be " + to_string(Shape{kImageSide, kImageSide}) + ", got " + to_string(mask.shape()));
    std::vector<T> out(kLatentTokens);
    for (std::size_t r = 0; r < kLatentSide; ++r)
        for (std::size_t c = 0; c < kLatentSide; ++c) {
            T s = 0;
            for (std::size_t dy = 0; dy < kPatch; ++dy)
                for (std::size_t dx = 0; dx < kPatch; ++dx) s += mask.at(r * kPatch + dy, c * kPatch + dx);
            out[r * kLatentSide + c] = (s / T(kPatch * kPatch)) >= T(0.5) ? T(1) : T(0);
        }
    return out;
}

/// m' average-pooled to each attention resolution (tokens -> weights in [0,1]).
template <class T>
std::map<std::size_t, std::vector<T>> mask_pyramid(const std::vector<T>& m_prime) {
    std::map<std::size_t, std::vector<T>> out;
    std::vector<T> level = m_prime;
    std::size_t side = kLatentSide;
    while (true) {
        out[side * side] = level;
        if (side % 2 || side == 1) break;
        const std::size_t half = side / 2;
        std::vector<T> next(half * half, T(0));
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) next[(r / 2) * half + c / 2] += T(0.25) * level[r * side + c];
        level = std::move(next);
        side = half;
    }
    return out;
}

template <class T>
struct InpaintContext {
    Tensor<T> z_t;        // [64, 8]
    Tensor<T> m_prime;    // [64, 1], 1 = keep
    Tensor<T> z0_masked;  // [64, 8] = E((x [+ delta]) * M)
    std::map<std::size_t, std::vector<T>> pyramid;

    /// Predictor input (z_t, m', z0_masked) concatenated to 17 channels.
    Tensor<T> input() const { return ops::concat<T>({z_t, m_prime, z0_masked}, 1); }

    InpaintContext with_latent(Tensor<T> z) const {
        InpaintContext c = *this;
        c.z_t = std::move(z);
        return c;
    }
};

template <class T>
Tensor<T> expand_mask_channels(const Tensor<T>& mask) {
    std::vector<T> m3(kImageSide * kImageSide * kImageChannels);
    for (std::size_t i = 0; i < kImageSide * kImageSide; ++i)
        for (std::size_t c = 0; c < kImageChannels; ++c) m3[i * kImageChannels + c] = mask[i];
    return Tensor<T>({kImageSide, kImageSide, kImageChannels}, std::move(m3));
}

/// The perturbation enters only through z0_masked: clamp(x + delta) * M is
/// encoded, so gradients reach delta through the keep region alone.
template <class T>
InpaintContext<T> make_inpaint_context(const LatentCodec<T>& codec, const Tensor<T>& x, const Tensor<T>& mask,
                                       const Tensor<T>* delta, const Tensor<T>& z_t) {
    const Shape img{kImageSide, kImageSide, kImageChannels};
    if (x.shape() != img) throw ShapeError("image must be " + to_string(img) + ", got " + to_string(x.shape()));
    if (delta && delta->shape() != img)
        throw ShapeError("perturbation " + to_string(delta->shape()) + " does not match image " + to_string(img));
    if (z_t.shape() != Shape{kLatentTokens, kLatentChannels})
        throw ShapeError("latent must be " + to_string(Shape{kLatentTokens, kLatentChannels}) + ", got " +
                         to_string(z_t.shape()));
    InpaintContext<T> ctx;
    auto mp = downsample_mask(mask);
    ctx.pyramid = mask_pyramid(mp);
    ctx.m_prime = Tensor<T>({kLatentTokens, 1}, mp);
    ctx.z_t = z_t;
    Tensor<T> src = delta ? ops::clamp(ops::add(x, *delta), T(0), T(1)) : x;
    ctx.z0_masked = codec.encode(ops::mul(src, expand_mask_channels(mask)));
    return ctx;
}

}  // namespace decoy
