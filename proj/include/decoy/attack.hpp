#pragma once

// Protective perturbation by signed projected gradient descent on the decoy
// loss: the cross-attention output without a token mask is pulled toward the
// output the same layer gives when forced onto the decoy token.

#include <cmath>
#include <optional>
#include <set>
#include <string>

#include "decoy/model.hpp"

namespace decoy {

enum class BasePromptKind { quality_tag, null, custom };
enum class RegionSelector { inpaint, keep };
enum class Objective { cross_attention, noise_pred };

struct AttackConfig {
    double epsilon = 12.0 / 255.0;
    double step_size = 2.0 / 255.0;
    std::size_t iterations = 400;
    std::size_t grad_samples = 1;
    std::set<std::size_t> layer_selection{16, 4};
    DecoyTarget decoy_target = DecoyTarget::bos;
    BasePromptKind base_prompt = BasePromptKind::quality_tag;
    std::string custom_prompt;
    RegionSelector region = RegionSelector::inpaint;
    bool stop_grad_target = false;
    double bias = kDecoyBias;
    std::size_t probe_count = 16;
    std::size_t probe_every = 50;
    Objective objective = Objective::cross_attention;
    std::size_t noise_pred_steps = 4;  // denoising steps unrolled by the noise-pred baseline
    std::uint64_t seed = 0;

    void validate(const PredictorConfig& pc) const {
        if (!(epsilon >= 0)) throw ConfigError("attack.epsilon must be >= 0");
        if (!(step_size > 0)) throw ConfigError("attack.step_size must be > 0");
        if (epsilon > 0 && step_size > epsilon) throw ConfigError("attack.step_size must not exceed attack.epsilon");
        if (iterations < 1) throw ConfigError("attack.iterations must be at least 1");
        if (grad_samples < 1) throw ConfigError("attack.grad_samples must be at least 1");
        if (probe_count < 1 || probe_every < 1) throw ConfigError("attack.probe_count and probe_every must be >= 1");
        if (noise_pred_steps < 1) throw ConfigError("attack.noise_pred_steps must be at least 1");
        std::set<std::size_t> available;
        for (const auto& id : list_cross_attention_layers(pc)) available.insert(id.resolution);
        for (auto r : layer_selection)
            if (!available.count(r))
                throw ConfigError("attack.layer_selection: no cross-attention layer at resolution " + std::to_string(r));
        if (objective == Objective::cross_attention && layer_selection.empty())
            throw ConfigError("attack.layer_selection is empty");
    }
};

/// Mean over the selected layers of || w (.) (CA_masked - CA_unmasked) ||_2,
/// with w the per-query region weight taken from the mask pyramid at that
/// layer's resolution: 1 - m' for the inpaint region, m' for the keep region.
template <class T>
Tensor<T> l_ca(const AttentionTrace<T>& masked, const AttentionTrace<T>& unmasked,
               const std::map<std::size_t, std::vector<T>>& pyramid, const std::vector<AttentionLayerId>& layers,
               RegionSelector region, bool stop_grad_target = false) {
    using namespace ops;
    if (layers.empty()) throw ConfigError("l_ca: empty layer selection");
    Tensor<T> total;
    for (const auto& id : layers) {
        auto find = [&](const AttentionTrace<T>& tr) -> const LayerTrace<T>& {
            for (const auto& l : tr.layers)
                if (l.id.index == id.index) return l;
            throw ShapeError("l_ca: trace has no layer " + std::to_string(id.index));
        };
        const auto& lm = find(masked);
        const auto& lu = find(unmasked);
        auto level = pyramid.find(id.resolution);
        if (level == pyramid.end() || level->second.size() != lu.output.dim(0))
            throw ShapeError("l_ca: no mask pyramid level for resolution " + std::to_string(id.resolution));
        std::vector<T> w(level->second.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = region == RegionSelector::inpaint ? T(1) - level->second[i] : level->second[i];
        const Tensor<T> target = stop_grad_target ? lm.output.detach() : lm.output;
        Tensor<T> term = l2_norm(mul_rows(sub(target, lu.output), Tensor<T>({level->second.size()}, std::move(w))));
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, T(1) / static_cast<T>(layers.size()));
}

/// clamp(delta, -eps, eps), then clamp(x + delta, 0, 1) - x. Entries already
/// feasible pass through untouched; the rest are nudged toward zero until the
/// rounded x + delta stays in [0, 1] and |delta| <= eps hold exactly.
template <class T>
Tensor<T> project(const Tensor<T>& delta, const Tensor<T>& x, T epsilon) {
    if (delta.shape() != x.shape())
        throw ShapeError("project: perturbation " + to_string(delta.shape()) + " vs image " + to_string(x.shape()));
    auto feasible = [&](T d, T xi) { return std::abs(d) <= epsilon && xi + d >= T(0) && xi + d <= T(1); };
    std::vector<T> out(delta.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (feasible(delta[i], x[i])) {
            out[i] = delta[i];
            continue;
        }
        const T d = std::clamp(delta[i], -epsilon, epsilon);
        T v = std::clamp(std::clamp(x[i] + d, T(0), T(1)) - x[i], -epsilon, epsilon);
        while (!feasible(v, x[i])) v = std::nextafter(v, T(0));
        out[i] = v;
    }
    return Tensor<T>(delta.shape(), std::move(out));
}

/// Throws if delta leaves the L-infinity ball or pushes x outside [0,1].
template <class T>
void check_budget(const Tensor<T>& delta, const Tensor<T>& x, T epsilon, std::size_t iteration) {
    for (std::size_t i = 0; i < delta.numel(); ++i) {
        const T v = x[i] + delta[i];
        if (std::abs(delta[i]) > epsilon || v < T(0) || v > T(1))
            throw Error("perturbation budget violated at iteration " + std::to_string(iteration) + ", element " +
                        std::to_string(i));
    }
}

struct AttackSample {
    std::size_t t = 0;
    Tensor<float> eps;
};

struct ProbePoint {
    std::size_t iteration = 0;  // number of updates applied
    double loss = 0;
    double best = 0;
};

struct AdversarialNoise {
    Tensor<float> delta;                // [16,16,3]
    std::vector<double> loss_history;   // objective value before each update
    std::vector<ProbePoint> probes;     // decoy loss on the fixed probe set
    AttackConfig config;
    std::uint64_t seed = 0;

    double initial_probe() const { return probes.front().loss; }
    double final_probe() const { return probes.back().loss; }
};

inline TokenSequence attack_base_prompt(const Vocabulary& vocab, const AttackConfig& cfg, std::size_t n) {
    switch (cfg.base_prompt) {
        case BasePromptKind::quality_tag: return base_prompts(vocab, n).quality_tag;
        case BasePromptKind::null: return base_prompts(vocab, n).null;
        case BasePromptKind::custom: return tokenize(vocab, cfg.custom_prompt, n);
    }
    throw ConfigError("unknown base prompt kind");
}

/// The (t, eps) draws of one PGD run, in consumption order.
inline std::vector<AttackSample> draw_attack_samples(const AttackConfig& cfg, std::size_t train_steps) {
    Rng rng = make_rng(cfg.seed, 0xA77AC);
    std::vector<AttackSample> out;
    for (std::size_t i = 0; i < cfg.iterations * cfg.grad_samples; ++i) {
        const auto t = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(train_steps)));
        out.push_back({t, randn<float>({kLatentTokens, kLatentChannels}, rng)});
    }
    return out;
}

/// Held-out draws used only for monitoring; independent of the update stream.
inline std::vector<AttackSample> draw_probe_samples(const AttackConfig& cfg, std::size_t train_steps) {
    Rng rng = make_rng(cfg.seed, 0x960BE);
    std::vector<AttackSample> out;
    for (std::size_t i = 0; i < cfg.probe_count; ++i) {
        const auto t = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(train_steps)));
        out.push_back({t, randn<float>({kLatentTokens, kLatentChannels}, rng)});
    }
    return out;
}

/// Everything protect() needs that does not depend on delta.
template <class T>
struct DecoySetup {
    const Model<T>* model = nullptr;
    AttackConfig cfg;
    Tensor<T> x, mask, z0;
    PromptEmbedding<T> e;
    TokenMask decoy;
    std::vector<AttentionLayerId> layers;

    DecoySetup(const Model<T>& m, const Tensor<float>& image, const Tensor<float>& keep, const AttackConfig& c)
        : model(&m), cfg(c) {
        cfg.validate(m.predictor.config);
        NoGrad<T> off;
        x = image.template cast<T>();
        mask = keep.template cast<T>();
        z0 = m.codec.encode(x);
        e = m.embed(attack_base_prompt(m.vocab, cfg, m.config.encoder.seq_len));
        decoy = make_token_mask(e, cfg.decoy_target);
        layers = list_cross_attention_layers(m.predictor.config, cfg.layer_selection);
    }

    /// Decoy loss at (delta, t, eps); differentiable in delta when recorded.
    Tensor<T> loss(const Tensor<T>& delta, std::size_t t, const Tensor<T>& eps) const {
        Tensor<T> z_t;
        {
            NoGrad<T> off;
            z_t = q_sample(model->schedule, z0, t, eps);
        }
        const auto ctx = make_inpaint_context<T>(model->codec, x, mask, &delta, z_t);
        const auto dual = dual_forward(model->predictor, ctx.input(), t, e, decoy, static_cast<T>(cfg.bias),
                                       layers.back().index);
        return l_ca(dual.masked, dual.unmasked, ctx.pyramid, layers, cfg.region, cfg.stop_grad_target);
    }

    double probe_loss(const Tensor<T>& delta, const std::vector<AttackSample>& probes) const {
        NoGrad<T> off;
        double s = 0;
        for (const auto& p : probes) s += static_cast<double>(loss(delta, p.t, p.eps.template cast<T>()).item());
        return s / static_cast<double>(probes.size());
    }

    /// Baseline objective: distance between the noise predictions of a short
    /// DDIM chain run from z_t on the perturbed context and the same chain on
    /// the clean context (maximized).
    Tensor<T> noise_pred_loss(const Tensor<T>& delta, std::size_t t, const Tensor<T>& eps) const {
        using namespace ops;
        const auto& sched = model->schedule;
        Tensor<T> z_t;
        {
            NoGrad<T> off;
            z_t = q_sample(sched, z0, t, eps);
        }
        std::vector<std::size_t> ts;
        const std::size_t n = std::min(cfg.noise_pred_steps, t);
        for (std::size_t i = 0; i < n; ++i) ts.push_back(t - i * t / n);
        Tensor<T> total;
        Tensor<T> z = z_t, z_ref = z_t;
        const auto ctx = make_inpaint_context<T>(model->codec, x, mask, &delta, z_t);
        InpaintContext<T> clean;
        {
            NoGrad<T> off;
            clean = make_inpaint_context<T>(model->codec, x, mask, nullptr, z_t);
        }
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const std::size_t ti = ts[i], tn = i + 1 < ts.size() ? ts[i + 1] : 0;
            Tensor<T> target;
            {
                NoGrad<T> off;
                target = predict_noise(model->predictor, clean.with_latent(z_ref).input(), ti, e).eps;
            }
            Tensor<T> pred = predict_noise(model->predictor, ctx.with_latent(z).input(), ti, e).eps;
            Tensor<T> term = l2_norm(sub(target, pred));
            total = total.defined() ? add(total, term) : term;
            const double ab = sched.alpha_bar(ti), abn = sched.alpha_bar(tn);
            auto ddim = [&](const Tensor<T>& zc, const Tensor<T>& ep) {
                Tensor<T> x0 = scale(sub(zc, scale(ep, static_cast<T>(std::sqrt(1 - ab)))), static_cast<T>(1 / std::sqrt(ab)));
                return add(scale(x0, static_cast<T>(std::sqrt(abn))), scale(ep, static_cast<T>(std::sqrt(1 - abn))));
            };
            z = ddim(z, pred);
            NoGrad<T> off;
            z_ref = ddim(z_ref, target);
        }
        return scale(total, T(1) / static_cast<T>(ts.size()));
    }
};

/// Runs signed PGD. The decoy objective is minimized; the noise-pred
/// baseline objective is maximized.
template <class T>
AdversarialNoise protect(const Model<T>& model, const Tensor<float>& x, const Tensor<float>& mask,
                         const AttackConfig& cfg) {
    if (!model.trained) throw Error("protect needs a trained checkpoint; this model is untrained");
    const DecoySetup<T> setup(model, x, mask, cfg);
    const T epsilon = static_cast<T>(cfg.epsilon), step = static_cast<T>(cfg.step_size);
    const auto samples = draw_attack_samples(cfg, model.schedule.steps);
    const auto probes = draw_probe_samples(cfg, model.schedule.steps);
    const bool descend = cfg.objective == Objective::cross_attention;

    AdversarialNoise out;
    out.config = cfg;
    out.seed = cfg.seed;
    Tensor<T> delta = Tensor<T>::zeros(setup.x.shape());

    auto record_probe = [&](std::size_t it) {
        const double v = setup.probe_loss(delta, probes);
        const double best = out.probes.empty() ? v : std::min(out.probes.back().best, v);
        out.probes.push_back({it, v, best});
    };
    record_probe(0);

    std::vector<T> g(delta.numel());
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::fill(g.begin(), g.end(), T(0));
        double loss = 0;
        for (std::size_t s = 0; s < cfg.grad_samples; ++s) {
            const auto& smp = samples[it * cfg.grad_samples + s];
            Tape<T> tape;
            const Tensor<T> d = delta.with_grad();
            Tensor<T> l;
            {
                Recording<T> rec(tape);
                const Tensor<T> eps = smp.eps.template cast<T>();
                l = descend ? setup.loss(d, smp.t, eps) : setup.noise_pred_loss(d, smp.t, eps);
            }
            loss += static_cast<double>(l.item());
            tape.backward(l);
            const Tensor<T> gd = tape.grad(d);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gd[i];
        }
        loss /= static_cast<double>(cfg.grad_samples);
        if (!std::isfinite(loss)) throw Error("attack loss is not finite at iteration " + std::to_string(it));
        out.loss_history.push_back(loss);

        std::vector<T> next(delta.numel());
        for (std::size_t i = 0; i < next.size(); ++i) {
            const T sg = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
            next[i] = descend ? delta[i] - step * sg : delta[i] + step * sg;
        }
        delta = project(Tensor<T>(delta.shape(), std::move(next)), setup.x, epsilon);
        check_budget(delta, setup.x, epsilon, it);

        if ((it + 1) % cfg.probe_every == 0 || it + 1 == cfg.iterations) record_probe(it + 1);
    }
    out.delta = delta.template cast<float>();
    return out;
}

/// x + delta, clamped into [0, 1].
inline Tensor<float> apply_perturbation(const Tensor<float>& x, const Tensor<float>& delta) {
    std::vector<float> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
    return Tensor<float>(x.shape(), std::move(v));
}

}  // namespace decoy
