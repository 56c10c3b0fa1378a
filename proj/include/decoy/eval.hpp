#pragma once

// Measurement: token attribution maps, attention mass per token class,
// PSNR/MSE, mask morphology and the robustness transforms.

#include <cmath>
#include <limits>
#include <set>

#include "decoy/dataset.hpp"
#include "decoy/predictor.hpp"

namespace decoy {

/// heat[token * 64 + position]: attention mass a latent position sends to a
/// prompt token, averaged over steps and layers.
struct AttentionAttribution {
    std::size_t tokens = 0;     // N
    std::size_t positions = 0;  // 64
    std::size_t prompt_len = 0;
    std::vector<double> heat;

    double at(std::size_t token, std::size_t pos) const { return heat[token * positions + pos]; }
};

/// Layers at coarser resolutions are upsampled to the 8x8 latent grid by
/// nearest neighbour before averaging; each position is then renormalized over
/// tokens. An empty selection means every layer.
template <class T>
AttentionAttribution attribute(const std::vector<AttentionTrace<T>>& traces, std::size_t prompt_len,
                               const std::set<std::size_t>& resolutions = {}) {
    if (traces.empty()) throw ConfigError("attribute: no traces");
    AttentionAttribution out;
    out.positions = kLatentTokens;
    out.prompt_len = prompt_len;
    std::size_t count = 0;
    for (const auto& tr : traces)
        for (const auto& layer : tr.layers) {
            if (!resolutions.empty() && !resolutions.count(layer.id.resolution)) continue;
            const auto& a = layer.attention;
            const std::size_t q = a.dim(0), n = a.dim(1);
            const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(q))));
            if (side * side != q || kLatentSide % side != 0)
                throw ShapeError("attribute: layer with " + std::to_string(q) + " queries is not a sub-grid");
            if (out.heat.empty()) {
                out.tokens = n;
                out.heat.assign(n * out.positions, 0.0);
            } else if (n != out.tokens) {
                throw ShapeError("attribute: traces disagree on the token count");
            }
            const std::size_t f = kLatentSide / side;
            for (std::size_t r = 0; r < kLatentSide; ++r)
                for (std::size_t c = 0; c < kLatentSide; ++c) {
                    const std::size_t src = (r / f) * side + c / f, pos = r * kLatentSide + c;
                    for (std::size_t k = 0; k < n; ++k)
                        out.heat[k * out.positions + pos] += static_cast<double>(a.at(src, k));
                }
            ++count;
        }
    if (count == 0) throw ConfigError("attribute: no trace layer matches the selection");
    for (std::size_t p = 0; p < out.positions; ++p) {
        double s = 0;
        for (std::size_t k = 0; k < out.tokens; ++k) s += out.heat[k * out.positions + p];
        for (std::size_t k = 0; k < out.tokens; ++k) out.heat[k * out.positions + p] /= s;
    }
    return out;
}

enum class TokenClass { content, bos, eos };

inline TokenClass token_class(std::size_t index, std::size_t prompt_len) {
    if (index == 0) return TokenClass::bos;
    return index <= prompt_len ? TokenClass::content : TokenClass::eos;
}

/// Mean over inpaint positions (m' == 0) of the summed mass of one class.
inline double attention_mass(const AttentionAttribution& attr, const std::vector<float>& m_prime, TokenClass cls) {
    if (m_prime.size() != attr.positions)
        throw ShapeError("attention_mass: mask has " + std::to_string(m_prime.size()) + " positions, attribution " +
                         std::to_string(attr.positions));
    double total = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < attr.positions; ++p) {
        if (m_prime[p] != 0.0f) continue;
        for (std::size_t k = 0; k < attr.tokens; ++k)
            if (token_class(k, attr.prompt_len) == cls) total += attr.at(k, p);
        ++n;
    }
    if (n == 0) throw ConfigError("attention_mass: the mask selects no inpaint positions");
    return total / static_cast<double>(n);
}

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

/// 10 log10(1 / MSE); +inf when the images are identical.
inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    const double m = mse(a, b);
    if (m == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

struct MetricsReport {
    double content_mass_inpaint = 0;
    double bos_mass_inpaint = 0;
    double eos_mass_inpaint = 0;
    double psnr_vs_oracle = 0;
    double mse_vs_oracle = 0;
};

inline MetricsReport class_masses(const AttentionAttribution& attr, const std::vector<float>& m_prime) {
    MetricsReport r;
    r.content_mass_inpaint = attention_mass(attr, m_prime, TokenClass::content);
    r.bos_mass_inpaint = attention_mass(attr, m_prime, TokenClass::bos);
    r.eos_mass_inpaint = attention_mass(attr, m_prime, TokenClass::eos);
    return r;
}

enum class MorphMode { erode, dilate };

/// Square-element morphology on the keep field (1 = keep). Neighbours outside
/// the image are ignored, which makes dilation the dual of erosion.
inline Tensor<float> morph(const Tensor<float>& mask, MorphMode mode, int kernel = 5, int iterations = 2) {
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("morph: kernel must be odd and >= 1, got " + std::to_string(kernel));
    if (iterations < 0) throw ConfigError("morph: iterations must be >= 0");
    if (mask.rank() != 2) throw ShapeError("morph: mask must be 2-D, got " + to_string(mask.shape()));
    const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1)), r = kernel / 2;
    std::vector<float> cur(mask.data().begin(), mask.data().end());
    for (int it = 0; it < iterations; ++it) {
        std::vector<float> next(cur.size());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float v = mode == MorphMode::erode ? 1.0f : 0.0f;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
                        const float s = cur[yy * w + xx] >= 0.5f ? 1.0f : 0.0f;
                        v = mode == MorphMode::erode ? std::min(v, s) : std::max(v, s);
                    }
                next[y * w + x] = v;
            }
        cur = std::move(next);
    }
    return Tensor<float>(mask.shape(), std::move(cur));
}

enum class RobustnessKind { quantize, boxblur };

/// QUANTIZE(levels): v -> round(v (levels-1)) / (levels-1).
/// BOXBLUR(radius): mean over a (2r+1)^2 window, edges clamped.
inline Tensor<float> robustness_transform(const Tensor<float>& x, RobustnessKind kind, int param) {
    if (x.rank() != 3) throw ShapeError("robustness_transform: image must be HxWxC, got " + to_string(x.shape()));
    std::vector<float> out(x.numel());
    if (kind == RobustnessKind::quantize) {
        if (param < 2) throw ConfigError("quantize: levels must be >= 2");
        const float q = static_cast<float>(param - 1);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(x[i] * q) / q;
    } else {
        if (param < 1) throw ConfigError("boxblur: radius must be >= 1");
        const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1)), c = static_cast<int>(x.dim(2));
        const float norm = 1.0f / static_cast<float>((2 * param + 1) * (2 * param + 1));
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int k = 0; k < c; ++k) {
                    float s = 0;
                    for (int dy = -param; dy <= param; ++dy)
                        for (int dx = -param; dx <= param; ++dx) {
                            const int yy = std::clamp(y + dy, 0, h - 1), xc = std::clamp(xx + dx, 0, w - 1);
                            s += x[(yy * w + xc) * c + k];
                        }
                    out[(y * w + xx) * c + k] = s * norm;
                }
    }
    return Tensor<float>(x.shape(), std::move(out));
}

/// Inside the inpaint region: mean of the colour's channels minus mean of the
/// remaining channels. For red this is R - (G + B) / 2.
inline double color_dominance(const Tensor<float>& img, const Tensor<float>& mask, Color color) {
    const auto ref = rgb(color);
    double s = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < kImageSide * kImageSide; ++p) {
        if (mask[p] >= 0.5f) continue;
        double on = 0, off = 0;
        int n_on = 0;
        for (std::size_t k = 0; k < 3; ++k) {
            const double v = img[p * 3 + k];
            if (ref[k] > 0.5f) {
                on += v;
                ++n_on;
            } else {
                off += v;
            }
        }
        s += on / n_on - off / (3 - n_on);
        ++n;
    }
    if (n == 0) throw ConfigError("color_dominance: mask has no inpaint pixels");
    return s / static_cast<double>(n);
}

}  // namespace decoy
