#pragma once

// Noise predictor: a multi-resolution token transformer shaped like a U-Net.
// Stages run at token resolutions 64, 16, 4, 16, 64 (8x8, 4x4, 2x2 grids);
// each stage is self-attention, cross-attention to the prompt embedding and an
// MLP, all pre-norm with residuals. Down/up stages pair through additive skips.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "decoy/ops.hpp"
#include "decoy/random.hpp"
#include "decoy/text_encoder.hpp"

namespace decoy {

inline constexpr float kDecoyBias = 1e4f;

struct PredictorConfig {
    std::size_t width = 32;           // D
    std::size_t mlp_mult = 2;
    std::size_t latent_channels = 8;
    std::size_t grid = 8;             // latent tokens laid out grid x grid
    std::size_t cond_width = 32;      // K of the prompt embedding
    std::size_t seq_len = 8;          // N
    double ca_logit_scale = 1.0;      // multiplies q k^T / sqrt(d) in cross-attention
    bool stage_context = true;        // re-inject the pooled input at every later stage

    std::size_t in_channels() const { return 2 * latent_channels + 1; }
    std::size_t tokens() const { return grid * grid; }
    /// Token grid side per stage, palindromic: 8, 4, 2, 4, 8.
    std::vector<std::size_t> stage_grids() const { return {grid, grid / 2, grid / 4, grid / 2, grid}; }
};

struct AttentionLayerId {
    std::size_t index = 0;       // position in forward order
    std::size_t resolution = 0;  // query tokens at that stage

    friend bool operator==(const AttentionLayerId&, const AttentionLayerId&) = default;
};

inline std::vector<AttentionLayerId> list_cross_attention_layers(const PredictorConfig& cfg) {
    std::vector<AttentionLayerId> out;
    auto grids = cfg.stage_grids();
    for (std::size_t i = 0; i < grids.size(); ++i) out.push_back({i, grids[i] * grids[i]});
    return out;
}

/// Layers whose resolution is in `resolutions`, in forward order.
inline std::vector<AttentionLayerId> list_cross_attention_layers(const PredictorConfig& cfg,
                                                                 const std::set<std::size_t>& resolutions) {
    std::vector<AttentionLayerId> out;
    for (const auto& id : list_cross_attention_layers(cfg))
        if (resolutions.count(id.resolution)) out.push_back(id);
    return out;
}

template <class T>
struct CrossAttentionWeights {
    Tensor<T> wq, wk, wv;
};

template <class T>
struct StageWeights {
    Tensor<T> temb_w;
    Tensor<T> ctx_w;  // pooled predictor input -> stage width (absent on stage 0)
    Tensor<T> ln1_g, ln1_b, sa_wq, sa_wk, sa_wv, sa_wo;
    Tensor<T> ln2_g, ln2_b;
    CrossAttentionWeights<T> ca;
    Tensor<T> ca_wo;
    Tensor<T> ln3_g, ln3_b, w1, b1, w2, b2;
};

template <class T>
struct PredictorWeights {
    PredictorConfig config;
    Tensor<T> w_in, b_in, pos;
    Tensor<T> t_w1, t_b1, t_w2, t_b2;
    std::vector<StageWeights<T>> stages;
    Tensor<T> ln_out_g, ln_out_b, w_out, b_out;

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f) {
        f("unet.w_in", self.w_in);
        f("unet.b_in", self.b_in);
        f("unet.pos", self.pos);
        f("unet.t_w1", self.t_w1);
        f("unet.t_b1", self.t_b1);
        f("unet.t_w2", self.t_w2);
        f("unet.t_b2", self.t_b2);
        for (std::size_t i = 0; i < self.stages.size(); ++i) {
            auto& s = self.stages[i];
            const std::string p = "unet.stage" + std::to_string(i) + ".";
            f(p + "temb_w", s.temb_w);
            if (s.ctx_w.defined()) f(p + "ctx_w", s.ctx_w);
            f(p + "ln1_g", s.ln1_g);
            f(p + "ln1_b", s.ln1_b);
            f(p + "sa_wq", s.sa_wq);
            f(p + "sa_wk", s.sa_wk);
            f(p + "sa_wv", s.sa_wv);
            f(p + "sa_wo", s.sa_wo);
            f(p + "ln2_g", s.ln2_g);
            f(p + "ln2_b", s.ln2_b);
            f(p + "ca_wq", s.ca.wq);
            f(p + "ca_wk", s.ca.wk);
            f(p + "ca_wv", s.ca.wv);
            f(p + "ca_wo", s.ca_wo);
            f(p + "ln3_g", s.ln3_g);
            f(p + "ln3_b", s.ln3_b);
            f(p + "w1", s.w1);
            f(p + "b1", s.b1);
            f(p + "w2", s.w2);
            f(p + "b2", s.b2);
        }
        f("unet.ln_out_g", self.ln_out_g);
        f("unet.ln_out_b", self.ln_out_b);
        f("unet.w_out", self.w_out);
        f("unet.b_out", self.b_out);
    }
};

template <class T>
PredictorWeights<T> init_predictor(const PredictorConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.width, h = cfg.width * cfg.mlp_mult, k = cfg.cond_width;
    auto lin = [&](std::size_t in, std::size_t out, T gain = T(1)) {
        return randn<T>({in, out}, rng, gain / std::sqrt(static_cast<T>(in)));
    };
    PredictorWeights<T> w;
    w.config = cfg;
    w.w_in = lin(cfg.in_channels(), d);
    w.b_in = Tensor<T>::zeros({d});
    w.pos = randn<T>({cfg.tokens(), d}, rng, T(0.1));
    w.t_w1 = lin(d, d);
    w.t_b1 = Tensor<T>::zeros({d});
    w.t_w2 = lin(d, d);
    w.t_b2 = Tensor<T>::zeros({d});
    for (std::size_t i = 0; i < cfg.stage_grids().size(); ++i) {
        StageWeights<T> s;
        s.temb_w = lin(d, d, T(0.5));
        if (i > 0 && cfg.stage_context) s.ctx_w = lin(cfg.in_channels(), d, T(0.5));
        s.ln1_g = Tensor<T>::full({d}, T(1));
        s.ln1_b = Tensor<T>::zeros({d});
        s.sa_wq = lin(d, d);
        s.sa_wk = lin(d, d);
        s.sa_wv = lin(d, d);
        s.sa_wo = lin(d, d, T(0.5));
        s.ln2_g = Tensor<T>::full({d}, T(1));
        s.ln2_b = Tensor<T>::zeros({d});
        s.ca.wq = lin(d, d);
        s.ca.wk = lin(k, d);
        s.ca.wv = lin(k, d);
        s.ca_wo = lin(d, d, T(0.5));
        s.ln3_g = Tensor<T>::full({d}, T(1));
        s.ln3_b = Tensor<T>::zeros({d});
        s.w1 = lin(d, h);
        s.b1 = Tensor<T>::zeros({h});
        s.w2 = lin(h, d, T(0.5));
        s.b2 = Tensor<T>::zeros({d});
        w.stages.push_back(std::move(s));
    }
    w.ln_out_g = Tensor<T>::full({d}, T(1));
    w.ln_out_b = Tensor<T>::zeros({d});
    w.w_out = lin(d, cfg.latent_channels, T(0.02));
    w.b_out = Tensor<T>::zeros({cfg.latent_channels});
    return w;
}

template <class T>
struct CrossAttentionOutput {
    Tensor<T> attention;  // [queries, N], rows sum to 1
    Tensor<T> output;     // [queries, D] = attention * V
};

/// softmax(q k^T / sqrt(d) + bias) v, with bias an optional [1, N] row.
template <class T>
CrossAttentionOutput<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Tensor<T>* bias = nullptr, T logit_scale = T(1)) {
    using namespace ops;
    const T inv_sqrt = logit_scale / std::sqrt(static_cast<T>(q.dim(1)));
    Tensor<T> logits = scale(matmul(q, transpose(k)), inv_sqrt);
    Tensor<T> a = bias ? softmax(logits, *bias) : softmax(logits);
    return {a, matmul(a, v)};
}

/// Queries from image features, keys and values from the prompt embedding.
/// A token mask adds mask * c to every logit row before the softmax.
template <class T>
CrossAttentionOutput<T> cross_attention(const Tensor<T>& phi, const Tensor<T>& e, const CrossAttentionWeights<T>& w,
                                        const TokenMask* mask, T c, T logit_scale = T(1)) {
    using namespace ops;
    if (mask && mask->size() != e.dim(0))
        throw ShapeError("token mask of length " + std::to_string(mask->size()) + " for " +
                         std::to_string(e.dim(0)) + " prompt tokens");
    Tensor<T> q = matmul(phi, w.wq), k = matmul(e, w.wk), v = matmul(e, w.wv);
    if (!mask) return attend(q, k, v, static_cast<const Tensor<T>*>(nullptr), logit_scale);
    Tensor<T> bias = mask->bias(c);
    return attend(q, k, v, &bias, logit_scale);
}

template <class T>
struct LayerTrace {
    AttentionLayerId id;
    Tensor<T> phi;        // features entering the cross-attention (post norm)
    Tensor<T> attention;  // [queries, N]
    Tensor<T> output;     // CA = attention * V
};

template <class T>
struct AttentionTrace {
    bool masked = false;
    std::vector<LayerTrace<T>> layers;
};

template <class T>
struct ForwardOptions {
    const TokenMask* mask = nullptr;
    T bias = T(kDecoyBias);
    bool trace = false;
    /// Stop right after this cross-attention layer (no noise output).
    std::optional<std::size_t> stop_after_layer;
};

template <class T>
struct ForwardResult {
    Tensor<T> eps;  // [tokens, latent_channels]; undefined when stopped early
    AttentionTrace<T> trace;
};

template <class T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t dim) {
    std::vector<T> v(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        v[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
        v[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
    }
    return Tensor<T>({1, dim}, std::move(v));
}

template <class T>
ForwardResult<T> forward(const PredictorWeights<T>& w, const Tensor<T>& input, std::size_t t,
                         const PromptEmbedding<T>& e, const ForwardOptions<T>& opt = {}) {
    using namespace ops;
    const auto& cfg = w.config;
    if (input.rank() != 2 || input.dim(1) != cfg.in_channels() || input.dim(0) != cfg.tokens())
        throw ShapeError("predictor input " + to_string(input.shape()) + ", expected " +
                         to_string(Shape{cfg.tokens(), cfg.in_channels()}));
    if (e.matrix.dim(0) != cfg.seq_len || e.matrix.dim(1) != cfg.cond_width)
        throw ShapeError("prompt embedding " + to_string(e.matrix.shape()) + " for predictor expecting " +
                         to_string(Shape{cfg.seq_len, cfg.cond_width}));

    ForwardResult<T> result;
    result.trace.masked = opt.mask != nullptr;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg.width));

    Tensor<T> temb = timestep_embedding<T>(t, cfg.width);
    temb = add(matmul(gelu(add(matmul(temb, w.t_w1), w.t_b1)), w.t_w2), w.t_b2);

    Tensor<T> h = add(add(matmul(input, w.w_in), w.b_in), w.pos);
    const auto grids = cfg.stage_grids();
    const std::size_t n_stages = grids.size();
    std::vector<Tensor<T>> skips(n_stages);
    std::map<std::size_t, Tensor<T>> pooled{{grids[0], input}};
    auto context_at = [&](std::size_t g) {
        while (!pooled.count(g)) {
            const std::size_t coarsest = pooled.begin()->first;
            pooled.emplace(coarsest / 2, pool_tokens(pooled.begin()->second, coarsest));
        }
        return pooled.at(g);
    };

    for (std::size_t s = 0; s < n_stages; ++s) {
        const auto& sw = w.stages[s];
        if (s > 0) {
            if (grids[s] < grids[s - 1]) {
                h = pool_tokens(h, grids[s - 1]);
            } else {
                h = upsample_tokens(h, grids[s - 1]);
                h = add(h, skips[n_stages - 1 - s]);
            }
        }
        h = add(h, matmul(temb, sw.temb_w));
        if (sw.ctx_w.defined()) h = add(h, matmul(context_at(grids[s]), sw.ctx_w));

        Tensor<T> a = layer_norm(h, sw.ln1_g, sw.ln1_b);
        Tensor<T> q = matmul(a, sw.sa_wq), k = matmul(a, sw.sa_wk), v = matmul(a, sw.sa_wv);
        Tensor<T> p = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
        h = add(h, matmul(matmul(p, v), sw.sa_wo));

        Tensor<T> phi = layer_norm(h, sw.ln2_g, sw.ln2_b);
        auto ca = cross_attention(phi, e.matrix, sw.ca, opt.mask, opt.bias, static_cast<T>(cfg.ca_logit_scale));
        if (opt.trace)
            result.trace.layers.push_back({{s, grids[s] * grids[s]}, phi, ca.attention, ca.output});
        if (opt.stop_after_layer && *opt.stop_after_layer == s) return result;
        h = add(h, matmul(ca.output, sw.ca_wo));

        Tensor<T> m = layer_norm(h, sw.ln3_g, sw.ln3_b);
        h = add(h, add(matmul(gelu(add(matmul(m, sw.w1), sw.b1)), sw.w2), sw.b2));
        skips[s] = h;
    }
    result.eps = add(matmul(layer_norm(h, w.ln_out_g, w.ln_out_b), w.w_out), w.b_out);
    return result;
}

template <class T>
ForwardResult<T> predict_noise(const PredictorWeights<T>& w, const Tensor<T>& input, std::size_t t,
                               const PromptEmbedding<T>& e, const TokenMask* mask = nullptr, bool trace = false) {
    ForwardOptions<T> opt;
    opt.mask = mask;
    opt.trace = trace;
    return forward(w, input, t, e, opt);
}

template <class T>
struct DualTrace {
    AttentionTrace<T> masked;
    AttentionTrace<T> unmasked;
};

/// The same input run twice: once with the decoy token mask applied to every
/// cross-attention, once without. Both branches are recorded on the active
/// tape. `last_layer` truncates both passes after that cross-attention.
template <class T>
DualTrace<T> dual_forward(const PredictorWeights<T>& w, const Tensor<T>& input, std::size_t t,
                          const PromptEmbedding<T>& e, const TokenMask& decoy, T c,
                          std::optional<std::size_t> last_layer = std::nullopt) {
    ForwardOptions<T> masked{&decoy, c, true, last_layer};
    ForwardOptions<T> plain{nullptr, c, true, last_layer};
    DualTrace<T> out;
    out.masked = forward(w, input, t, e, masked).trace;
    out.unmasked = forward(w, input, t, e, plain).trace;
    return out;
}

}  // namespace decoy
