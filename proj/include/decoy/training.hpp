#pragma once

// Joint training of text encoder and noise predictor on the procedural corpus
// with the epsilon-prediction objective.

#include <cmath>
#include <functional>

#include "decoy/dataset.hpp"
#include "decoy/model.hpp"
#include "decoy/optim.hpp"

namespace decoy {

struct TrainConfig {
    std::size_t steps = 12000;
    std::size_t batch = 8;
    double lr = 1e-3;
    std::size_t warmup = 200;
    double lr_floor = 0.1;      // cosine decay ends at lr * lr_floor
    double null_prompt_prob = 0.1;
    double full_prompt_prob = 0.5;  // of the non-null draws
    double ema_decay = 0.99;
    double loss_threshold = 0.08;
    double divergence_factor = 10.0;
    std::size_t divergence_window = 500;
    std::uint64_t data_seed = kTrainSeedBase;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch < 1) throw ConfigError("train.batch must be at least 1");
        if (!(lr > 0)) throw ConfigError("train.lr must be positive");
        if (!(null_prompt_prob >= 0 && null_prompt_prob <= 1)) throw ConfigError("train.null_prompt_prob outside [0,1]");
        if (!(ema_decay >= 0 && ema_decay < 1)) throw ConfigError("train.ema_decay outside [0,1)");
    }
};

inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
    if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    const double span = std::max<double>(1.0, static_cast<double>(cfg.steps - cfg.warmup));
    const double p = std::min(1.0, static_cast<double>(step - cfg.warmup) / span);
    return cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + std::cos(3.14159265358979323846 * p)));
}

struct TrainReport {
    std::vector<double> loss;  // per step, batch mean
    std::vector<double> ema;
    double final_ema = 0;
    bool below_threshold = false;
};

class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, double loss, double initial, double factor)
        : Error("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(loss) +
                " stayed above " + std::to_string(factor) + "x the initial " + std::to_string(initial)),
          step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

/// One epsilon-prediction loss on a single example.
template <class T>
Tensor<T> example_loss(const Model<T>& model, const CaptionedExample& ex, const TokenSequence& prompt, std::size_t t,
                       const Tensor<T>& eps) {
    const Tensor<T> x = ex.image.template cast<T>(), m = ex.mask.template cast<T>();
    const Tensor<T> z_t = q_sample(model.schedule, model.codec.encode(x), t, eps);
    const auto ctx = make_inpaint_context<T>(model.codec, x, m, nullptr, z_t);
    const auto e = model.embed(prompt);
    return ops::mse(predict_noise(model.predictor, ctx.input(), t, e).eps, eps);
}

template <class T>
TrainReport train(Model<T>& model, const TrainConfig& cfg,
                  const std::function<void(std::size_t, double, double)>& progress = {}) {
    cfg.validate();
    TrainReport rep;
    const BasePrompts base = base_prompts(model.vocab, model.config.encoder.seq_len);
    Rng rng = make_rng(cfg.seed, 0x7EA1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    AdamState<T> adam;
    const AdamConfig<T> adam_cfg;

    std::vector<std::string> names;
    model.visit_trainable([&](const std::string& n, Tensor<T>&) { names.push_back(n); });

    double ema = 0, initial = 0;
    std::size_t above = 0;
    std::uint64_t next_example = cfg.data_seed;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        model.set_trainable(true);
        std::vector<Tensor<T>> params;
        model.visit_trainable([&](const std::string&, Tensor<T>& p) { params.push_back(p); });

        Tape<T> tape;
        double loss_value = 0;
        {
            Recording<T> rec(tape);
            Tensor<T> total;
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                const CaptionedExample ex = make_example(next_example++);
                const double u = unif(rng);
                TokenSequence prompt;
                if (u < cfg.null_prompt_prob)
                    prompt = base.null;
                else
                    prompt = model.tokens(unif(rng) < cfg.full_prompt_prob ? ex.prompt_full : ex.prompt_mask);
                const auto t = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(model.schedule.steps)));
                const Tensor<T> eps = randn<T>({kLatentTokens, kLatentChannels}, rng);
                Tensor<T> l = example_loss(model, ex, prompt, t, eps);
                total = total.defined() ? ops::add(total, l) : l;
            }
            total = ops::scale(total, T(1) / static_cast<T>(cfg.batch));
            loss_value = static_cast<double>(total.item());
            if (!std::isfinite(loss_value))
                throw Error("training loss is not finite at step " + std::to_string(step));
            tape.backward(total);
        }
        std::vector<Tensor<T>> grads;
        for (const auto& p : params) grads.push_back(tape.grad(p));
        params = adam_step(params, grads, adam, static_cast<T>(learning_rate(cfg, step)), adam_cfg);
        std::size_t i = 0;
        model.visit_trainable([&](const std::string&, Tensor<T>& p) { p = params[i++]; });

        if (step == 0) {
            initial = loss_value;
            ema = loss_value;
        } else {
            ema = cfg.ema_decay * ema + (1 - cfg.ema_decay) * loss_value;
        }
        rep.loss.push_back(loss_value);
        rep.ema.push_back(ema);
        above = loss_value > cfg.divergence_factor * initial ? above + 1 : 0;
        if (above >= cfg.divergence_window) throw DivergenceError(step, loss_value, initial, cfg.divergence_factor);
        if (progress) progress(step, loss_value, ema);
    }
    model.set_trainable(false);
    model.trained = true;
    rep.final_ema = rep.ema.empty() ? 0 : rep.ema.back();
    rep.below_threshold = !rep.ema.empty() && rep.final_ema < cfg.loss_threshold;
    return rep;
}

}  // namespace decoy
