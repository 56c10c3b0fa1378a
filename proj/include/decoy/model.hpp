#pragma once

// Everything a checkpoint holds: vocabulary, text encoder, noise predictor,
// schedule and codec.

#include <cstdint>
#include <map>

#include "decoy/diffusion.hpp"
#include "decoy/predictor.hpp"
#include "decoy/text_encoder.hpp"

namespace decoy {

struct ModelConfig {
    TextEncoderConfig encoder;
    PredictorConfig predictor;
    std::size_t schedule_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.2;
    std::uint64_t codec_seed = 17;
    double codec_detail_gain = 7.0;  // gain on the codec detail channels 3-7
    std::uint64_t seed = 0;
};

template <class T>
struct Model {
    ModelConfig config;
    Vocabulary vocab;
    TextEncoderWeights<T> encoder;
    PredictorWeights<T> predictor;
    NoiseSchedule schedule;
    LatentCodec<T> codec;
    bool trained = false;

    /// Every named tensor (trainable weights plus the fixed codec).
    template <class F>
    void visit(F&& f) {
        encoder.visit(f);
        predictor.visit(f);
        f(std::string("codec.enc"), codec.enc);
        f(std::string("codec.dec"), codec.dec);
    }
    template <class F>
    void visit(F&& f) const {
        encoder.visit(f);
        predictor.visit(f);
        f(std::string("codec.enc"), codec.enc);
        f(std::string("codec.dec"), codec.dec);
    }

    /// Trainable tensors only, in a fixed order.
    template <class F>
    void visit_trainable(F&& f) {
        encoder.visit(f);
        predictor.visit(f);
    }

    PromptEmbedding<T> embed(const TokenSequence& tokens) const { return encode(encoder, tokens); }
    PromptEmbedding<T> embed(std::string_view prompt) const {
        return embed(tokenize(vocab, prompt, config.encoder.seq_len));
    }
    TokenSequence tokens(std::string_view prompt) const { return tokenize(vocab, prompt, config.encoder.seq_len); }

    template <class U>
    Model<U> cast() const {
        Model<U> out;
        out.config = config;
        out.vocab = vocab;
        out.schedule = schedule;
        out.trained = trained;
        out.encoder.config = encoder.config;
        out.encoder.blocks.resize(encoder.blocks.size());
        out.predictor.config = predictor.config;
        out.predictor.stages.resize(predictor.stages.size());
        // Optional tensors are only visited when defined, so mark them first.
        for (std::size_t s = 0; s < predictor.stages.size(); ++s)
            if (predictor.stages[s].ctx_w.defined()) out.predictor.stages[s].ctx_w = Tensor<U>::zeros({1});
        std::map<std::string, Tensor<U>> converted;
        visit([&](const std::string& n, const Tensor<T>& t) { converted[n] = t.template cast<U>(); });
        std::size_t assigned = 0;
        out.visit([&](const std::string& n, Tensor<U>& t) {
            t = converted.at(n);
            ++assigned;
        });
        if (assigned != converted.size()) throw Error("model cast visited " + std::to_string(assigned) + " of " +
                                                      std::to_string(converted.size()) + " tensors");
        return out;
    }

    void set_trainable(bool on) {
        visit_trainable([&](const std::string&, Tensor<T>& t) { t = on ? t.with_grad() : t.detach(); });
    }
};

template <class T>
Model<T> init_model(const ModelConfig& cfg) {
    Model<T> m;
    m.config = cfg;
    m.config.predictor.cond_width = cfg.encoder.width;
    m.config.predictor.seq_len = cfg.encoder.seq_len;
    Rng rng = make_rng(cfg.seed, 0x1417);
    m.encoder = init_text_encoder<T>(m.config.encoder, m.vocab.size(), rng);
    m.predictor = init_predictor<T>(m.config.predictor, rng);
    m.schedule = NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
    m.codec = LatentCodec<T>::make(cfg.codec_seed, cfg.codec_detail_gain);
    return m;
}

}  // namespace decoy
