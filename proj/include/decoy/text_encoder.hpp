#pragma once

// Word-level tokenizer and a small causal transformer that turns a prompt
// into an N x K embedding laid out as [BOS, prompt..., EOS...].

#include <cmath>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "decoy/ops.hpp"
#include "decoy/random.hpp"

namespace decoy {

inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;

class Vocabulary {
public:
    Vocabulary() : Vocabulary(default_tokens()) {}

    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < 2 || tokens_[kBosId] != "<bos>" || tokens_[kEosId] != "<eos>")
            throw ConfigError("vocabulary must start with <bos>, <eos>");
        if (tokens_.size() > 32) throw ConfigError("vocabulary holds at most 32 tokens");
    }

    static std::vector<std::string> default_tokens() {
        return {"<bos>",  "<eos>", "circle", "square", "triangle", "cross",      "red",         "green", "blue",
                "yellow", "a",     "the",    "on",     "background", "masterpiece", "best",  "quality"};
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& word(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    int id(std::string_view word) const {
        for (std::size_t i = 2; i < tokens_.size(); ++i)
            if (tokens_[i] == word) return static_cast<int>(i);
        throw ConfigError("unknown word '" + std::string(word) + "'");
    }

private:
    std::vector<std::string> tokens_;
};

inline std::vector<std::string> split_words(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::vector<std::string> words;
    for (std::string w; is >> w;) words.push_back(w);
    return words;
}

struct TokenSequence {
    std::vector<int> ids;
    std::size_t prompt_len = 0;
};

/// [BOS, w_0 .. w_{|p|-1}, EOS ...] of length n; prompts longer than n-2
/// words keep the first n-2 and end in a single EOS.
inline TokenSequence tokenize(const Vocabulary& vocab, const std::vector<std::string>& words, std::size_t n = 8) {
    if (n < 2) throw ConfigError("sequence length must be at least 2");
    TokenSequence seq;
    seq.prompt_len = std::min(words.size(), n - 2);
    seq.ids.assign(n, kEosId);
    seq.ids[0] = kBosId;
    for (std::size_t i = 0; i < words.size(); ++i) {
        int id = vocab.id(words[i]);  // validate every word, even truncated ones
        if (i < seq.prompt_len) seq.ids[1 + i] = id;
    }
    return seq;
}

inline TokenSequence tokenize(const Vocabulary& vocab, std::string_view prompt, std::size_t n = 8) {
    return tokenize(vocab, split_words(prompt), n);
}

struct BasePrompts {
    TokenSequence quality_tag;
    TokenSequence null;
};

inline constexpr std::string_view kQualityTagPrompt = "masterpiece best quality";

inline BasePrompts base_prompts(const Vocabulary& vocab, std::size_t n = 8) {
    return {tokenize(vocab, kQualityTagPrompt, n), tokenize(vocab, "", n)};
}

struct TextEncoderConfig {
    std::size_t seq_len = 8;  // N
    std::size_t width = 32;   // K
    std::size_t heads = 2;
    std::size_t blocks = 2;
    std::size_t mlp_mult = 2;
};

template <class T>
struct EncoderBlock {
    Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class T>
struct TextEncoderWeights {
    TextEncoderConfig config;
    Tensor<T> tok_emb, pos_emb;
    std::vector<EncoderBlock<T>> blocks;
    Tensor<T> lnf_g, lnf_b;

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
        f("enc.tok_emb", self.tok_emb);
        f("enc.pos_emb", self.pos_emb);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            auto& b = self.blocks[i];
            const std::string p = "enc.block" + std::to_string(i) + ".";
            f(p + "ln1_g", b.ln1_g);
            f(p + "ln1_b", b.ln1_b);
            f(p + "wq", b.wq);
            f(p + "wk", b.wk);
            f(p + "wv", b.wv);
            f(p + "wo", b.wo);
            f(p + "ln2_g", b.ln2_g);
            f(p + "ln2_b", b.ln2_b);
            f(p + "w1", b.w1);
            f(p + "b1", b.b1);
            f(p + "w2", b.w2);
            f(p + "b2", b.b2);
        }
        f("enc.lnf_g", self.lnf_g);
        f("enc.lnf_b", self.lnf_b);
    }
};

template <class T>
TextEncoderWeights<T> init_text_encoder(const TextEncoderConfig& cfg, std::size_t vocab_size, Rng& rng) {
    const std::size_t k = cfg.width, h = cfg.width * cfg.mlp_mult;
    const T s = T(1) / std::sqrt(static_cast<T>(k));
    TextEncoderWeights<T> w;
    w.config = cfg;
    w.tok_emb = randn<T>({vocab_size, k}, rng, T(1));
    w.pos_emb = randn<T>({cfg.seq_len, k}, rng, T(0.5));
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        EncoderBlock<T> b;
        b.ln1_g = Tensor<T>::full({k}, T(1));
        b.ln1_b = Tensor<T>::zeros({k});
        b.wq = randn<T>({k, k}, rng, s);
        b.wk = randn<T>({k, k}, rng, s);
        b.wv = randn<T>({k, k}, rng, s);
        b.wo = randn<T>({k, k}, rng, s);
        b.ln2_g = Tensor<T>::full({k}, T(1));
        b.ln2_b = Tensor<T>::zeros({k});
        b.w1 = randn<T>({k, h}, rng, s);
        b.b1 = Tensor<T>::zeros({h});
        b.w2 = randn<T>({h, k}, rng, T(1) / std::sqrt(static_cast<T>(h)));
        b.b2 = Tensor<T>::zeros({k});
        w.blocks.push_back(std::move(b));
    }
    w.lnf_g = Tensor<T>::full({k}, T(1));
    w.lnf_b = Tensor<T>::zeros({k});
    return w;
}

template <class T>
struct PromptEmbedding {
    Tensor<T> matrix;  // [N, K]
    std::size_t prompt_len = 0;

    std::size_t seq_len() const { return matrix.dim(0); }
    std::size_t width() const { return matrix.dim(1); }
    std::size_t first_eos() const { return 1 + prompt_len; }
};

/// Runs the causal blocks on an [N, K] input (token + position embeddings).
/// Row i of the result depends only on input rows 0..i.
template <class T>
Tensor<T> encode_inputs(const TextEncoderWeights<T>& w, const Tensor<T>& input) {
    using namespace ops;
    const auto& cfg = w.config;
    if (input.rank() != 2 || input.dim(0) != cfg.seq_len || input.dim(1) != cfg.width)
        throw ShapeError("text encoder input " + to_string(input.shape()) + " vs expected " +
                         to_string(Shape{cfg.seq_len, cfg.width}));
    const std::size_t hd = cfg.width / cfg.heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
    Tensor<T> x = input;
    for (const auto& b : w.blocks) {
        Tensor<T> a = layer_norm(x, b.ln1_g, b.ln1_b);
        Tensor<T> q = matmul(a, b.wq), k = matmul(a, b.wk), v = matmul(a, b.wv);
        std::vector<Tensor<T>> heads;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            auto qh = slice(q, 1, h * hd, (h + 1) * hd);
            auto kh = slice(k, 1, h * hd, (h + 1) * hd);
            auto vh = slice(v, 1, h * hd, (h + 1) * hd);
            auto p = causal_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
            heads.push_back(matmul(p, vh));
        }
        x = add(x, matmul(concat(heads, 1), b.wo));
        Tensor<T> m = layer_norm(x, b.ln2_g, b.ln2_b);
        x = add(x, add(matmul(gelu(add(matmul(m, b.w1), b.b1)), b.w2), b.b2));
    }
    return layer_norm(x, w.lnf_g, w.lnf_b);
}

template <class T>
Tensor<T> encoder_inputs(const TextEncoderWeights<T>& w, const TokenSequence& tokens) {
    if (tokens.ids.size() != w.config.seq_len)
        throw ShapeError("token sequence of length " + std::to_string(tokens.ids.size()) +
                         " for encoder with N=" + std::to_string(w.config.seq_len));
    return ops::add(ops::embedding(w.tok_emb, tokens.ids), w.pos_emb);
}

template <class T>
PromptEmbedding<T> encode(const TextEncoderWeights<T>& w, const TokenSequence& tokens) {
    return {encode_inputs(w, encoder_inputs(w, tokens)), tokens.prompt_len};
}

enum class DecoyTarget { bos, first_eos };

/// One-hot selector over prompt-embedding rows; its bias form (mask * c) is
/// added to cross-attention logits.
struct TokenMask {
    std::vector<float> values;
    DecoyTarget target = DecoyTarget::bos;

    std::size_t size() const { return values.size(); }

    /// Every token selected. Adds the same constant to every logit, which
    /// softmax ignores; used as a wiring check.
    static TokenMask all(std::size_t n) { return {std::vector<float>(n, 1.0f), DecoyTarget::bos}; }

    template <class T>
    Tensor<T> bias(T c) const {
        std::vector<T> b(values.size());
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<T>(values[i]) * c;
        const std::size_t n = b.size();
        return Tensor<T>({1, n}, std::move(b));
    }
};

template <class T>
TokenMask make_token_mask(const PromptEmbedding<T>& e, DecoyTarget target) {
    TokenMask m{std::vector<float>(e.seq_len(), 0.0f), target};
    m.values[target == DecoyTarget::bos ? 0 : e.first_eos()] = 1.0f;
    return m;
}

}  // namespace decoy
