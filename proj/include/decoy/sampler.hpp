#pragma once

// Classifier-free-guided inpainting sampler with a deterministic DDIM update.

#include <cmath>

#include "decoy/model.hpp"

namespace decoy {

struct SamplerConfig {
    std::size_t inference_steps = 25;
    double cfg_scale = 7.5;  // w
    double strength = 1.0;   // s in (0, 1]
    std::uint64_t seed = 0;

    void validate(std::size_t train_steps) const {
        if (inference_steps < 1 || inference_steps > train_steps)
            throw ConfigError("inference_steps must lie in [1," + std::to_string(train_steps) + "]");
        if (!(cfg_scale >= 0)) throw ConfigError("cfg_scale must be >= 0");
        if (!(strength > 0 && strength <= 1)) throw ConfigError("strength must lie in (0,1]");
    }
};

/// Evenly spaced timesteps t_i = floor((i+1) T / S), i = 0..S-1 (ascending).
inline std::vector<std::size_t> timestep_grid(std::size_t train_steps, std::size_t inference_steps) {
    std::vector<std::size_t> grid(inference_steps);
    for (std::size_t i = 0; i < inference_steps; ++i) grid[i] = (i + 1) * train_steps / inference_steps;
    return grid;
}

/// Number of grid steps actually run: ceil(s * S), at least one.
inline std::size_t steps_for_strength(double strength, std::size_t inference_steps) {
    auto k = static_cast<std::size_t>(std::ceil(strength * static_cast<double>(inference_steps) - 1e-9));
    return std::clamp<std::size_t>(k, 1, inference_steps);
}

/// (1 + w) eps_cond - w eps_uncond
template <class T>
Tensor<T> guided_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, T w) {
    return ops::sub(ops::scale(eps_cond, T(1) + w), ops::scale(eps_uncond, w));
}

template <class T>
struct SampleResult {
    Tensor<float> image;                        // composited, [16,16,3]
    std::vector<AttentionTrace<T>> traces;      // conditional passes, one per step
};

template <class T>
SampleResult<T> sample_inpaint(const Model<T>& model, const Tensor<float>& x, const Tensor<float>& mask,
                               const TokenSequence& prompt, const SamplerConfig& cfg, bool trace = false) {
    cfg.validate(model.schedule.steps);
    NoGrad<T> off;
    const auto& sched = model.schedule;
    const Tensor<T> xt = x.template cast<T>(), mt = mask.template cast<T>();
    const PromptEmbedding<T> e_cond = model.embed(prompt);
    const PromptEmbedding<T> e_null = model.embed(base_prompts(model.vocab, model.config.encoder.seq_len).null);
    const T w = static_cast<T>(cfg.cfg_scale);

    const auto grid = timestep_grid(sched.steps, cfg.inference_steps);
    const std::size_t run = steps_for_strength(cfg.strength, cfg.inference_steps);

    Rng rng = make_rng(cfg.seed, 0x5A3D);
    Tensor<T> noise = randn<T>({kLatentTokens, kLatentChannels}, rng);
    Tensor<T> z = run == cfg.inference_steps ? noise : q_sample(sched, model.codec.encode(xt), grid[run - 1], noise);

    InpaintContext<T> ctx = make_inpaint_context<T>(model.codec, xt, mt, nullptr, z);
    SampleResult<T> out;
    for (std::size_t i = run; i-- > 0;) {
        const std::size_t t = grid[i];
        ctx = ctx.with_latent(z);
        const Tensor<T> input = ctx.input();
        auto cond = predict_noise(model.predictor, input, t, e_cond, nullptr, trace);
        Tensor<T> eps = cond.eps;
        if (w != T(0)) eps = guided_noise(cond.eps, predict_noise(model.predictor, input, t, e_null).eps, w);
        if (trace) out.traces.push_back(std::move(cond.trace));

        const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(i > 0 ? grid[i - 1] : 0);
        Tensor<T> x0 = ops::scale(ops::sub(z, ops::scale(eps, static_cast<T>(std::sqrt(1 - ab)))),
                                  static_cast<T>(1 / std::sqrt(ab)));
        z = ops::add(ops::scale(x0, static_cast<T>(std::sqrt(ab_prev))),
                     ops::scale(eps, static_cast<T>(std::sqrt(1 - ab_prev))));
    }

    Tensor<T> gen = model.codec.decode(z);
    std::vector<float> px(x.numel());
    for (std::size_t p = 0; p < kImageSide * kImageSide; ++p)
        for (std::size_t c = 0; c < kImageChannels; ++c) {
            const std::size_t i = p * kImageChannels + c;
            px[i] = mask[p] >= 0.5f ? x[i] : std::clamp(static_cast<float>(gen[i]), 0.0f, 1.0f);
        }
    out.image = Tensor<float>(x.shape(), std::move(px));
    return out;
}

}  // namespace decoy
