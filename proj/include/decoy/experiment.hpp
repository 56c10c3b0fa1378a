#pragma once

// Oracle-vs-protected comparisons shared by the CLI and the acceptance suite.

#include <algorithm>
#include <chrono>
#include <optional>
#include <functional>
#include <map>
#include <tuple>

#include "decoy/attack.hpp"
#include "decoy/dataset.hpp"
#include "decoy/eval.hpp"
#include "decoy/sampler.hpp"

namespace decoy {

struct ImageCase {
    std::size_t index = 0;
    std::uint64_t seed = 0;  // corpus seed, 0 for files
    Tensor<float> image, mask;
    std::string prompt;
    std::optional<Color> color;
};

inline ImageCase case_from_example(const CaptionedExample& ex, std::size_t index) {
    return {index, ex.seed, ex.image, ex.mask, ex.prompt_mask, ex.scene.color};
}

inline std::vector<ImageCase> test_cases(std::uint64_t first_seed, std::size_t n) {
    std::vector<ImageCase> out;
    const auto examples = generate(first_seed, n);
    for (std::size_t i = 0; i < examples.size(); ++i) out.push_back(case_from_example(examples[i], i));
    return out;
}

/// One traced inpaint and what it says about prompt influence.
struct InpaintMeasure {
    Tensor<float> image;
    MetricsReport masses;
    double dominance = std::numeric_limits<double>::quiet_NaN();
};

inline InpaintMeasure measure_inpaint(const Model<float>& model, const ImageCase& c, const Tensor<float>& input,
                                      const Tensor<float>& mask, const SamplerConfig& sc) {
    const TokenSequence prompt = model.tokens(c.prompt);
    auto res = sample_inpaint(model, input, mask, prompt, sc, true);
    InpaintMeasure m;
    const auto m_prime = downsample_mask(mask);
    // A strongly shrunk mask can lose every inpaint cell; its masses are then undefined.
    if (std::find(m_prime.begin(), m_prime.end(), 0.0f) != m_prime.end())
        m.masses = class_masses(attribute(res.traces, prompt.prompt_len), m_prime);
    else
        m.masses.content_mass_inpaint = m.masses.bos_mass_inpaint = m.masses.eos_mass_inpaint =
            std::numeric_limits<double>::quiet_NaN();
    const auto md = mask.data();
    const bool any_inpaint = std::any_of(md.begin(), md.end(), [](float v) { return v < 0.5f; });
    if (c.color && any_inpaint) m.dominance = color_dominance(res.image, mask, *c.color);
    m.image = std::move(res.image);
    return m;
}

struct PairMetrics {
    MetricsReport oracle, protected_;
    double psnr = 0, mse = 0;
    double dominance_oracle = 0, dominance_protected = 0;
};

inline PairMetrics compare(const InpaintMeasure& oracle, const InpaintMeasure& prot) {
    PairMetrics p;
    p.oracle = oracle.masses;
    p.protected_ = prot.masses;
    p.mse = mse(oracle.image, prot.image);
    p.psnr = psnr(oracle.image, prot.image);
    p.dominance_oracle = oracle.dominance;
    p.dominance_protected = prot.dominance;
    return p;
}

/// Sampler seed for (image index, sweep seed). Distinct pairs get distinct
/// noise without tying the image order to the seed list.
inline std::uint64_t pair_seed(std::size_t image_index, std::uint64_t seed) {
    return seed * 0x9E3779B97F4A7C15ull + image_index;
}

struct ProtectedCase {
    AdversarialNoise noise;
    Tensor<float> image;  // x + delta
    double seconds = 0;
};

inline ProtectedCase protect_case(const Model<float>& model, const ImageCase& c, AttackConfig cfg) {
    cfg.seed = pair_seed(c.index, cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    ProtectedCase out;
    out.noise = protect(model, c.image, c.mask, cfg);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.image = apply_perturbation(c.image, out.noise.delta);
    return out;
}

enum class SweepAxis { cfg_scale, epsilon, inference_steps, strength, layer_selection, mask_morph, robustness };

inline const char* name(SweepAxis a) {
    switch (a) {
        case SweepAxis::cfg_scale: return "cfg_scale";
        case SweepAxis::epsilon: return "epsilon";
        case SweepAxis::inference_steps: return "inference_steps";
        case SweepAxis::strength: return "strength";
        case SweepAxis::layer_selection: return "layer_selection";
        case SweepAxis::mask_morph: return "mask_morph";
        case SweepAxis::robustness: return "robustness";
    }
    return "?";
}

inline SweepAxis parse_axis(const std::string& s) {
    for (auto a : {SweepAxis::cfg_scale, SweepAxis::epsilon, SweepAxis::inference_steps, SweepAxis::strength,
                   SweepAxis::layer_selection, SweepAxis::mask_morph, SweepAxis::robustness})
        if (s == name(a)) return a;
    throw ConfigError("unknown sweep axis '" + s + "'");
}

/// Axes whose values only change the sampler (or what it is fed), so one
/// protection per image serves every value.
inline bool reuses_protection(SweepAxis a) {
    return a != SweepAxis::epsilon && a != SweepAxis::layer_selection;
}

struct RobustnessSpec {
    std::optional<RobustnessKind> kind;  // empty: identity
    int param = 0;
};

/// "none", "quantize:<levels>" or "boxblur:<radius>".
inline RobustnessSpec parse_robustness(const std::string& s) {
    if (s == "none") return {};
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("robustness value '" + s + "' is not none|quantize:N|boxblur:N");
    const std::string kind = s.substr(0, colon);
    int param = 0;
    try {
        std::size_t used = 0;
        param = std::stoi(s.substr(colon + 1), &used);
        if (used != s.size() - colon - 1) throw std::invalid_argument(s);
    } catch (const std::exception&) {
        throw ConfigError("robustness value '" + s + "' has a bad parameter");
    }
    RobustnessSpec r;
    r.param = param;
    if (kind == "quantize") {
        r.kind = RobustnessKind::quantize;
        if (param < 2) throw ConfigError("quantize levels must be >= 2");
    } else if (kind == "boxblur") {
        r.kind = RobustnessKind::boxblur;
        if (param < 1) throw ConfigError("boxblur radius must be >= 1");
    } else {
        throw ConfigError("robustness kind '" + kind + "' is not quantize or boxblur");
    }
    return r;
}

/// shrink: the inpaint region loses a band (KEEP dilated);
/// expand: it gains one (KEEP eroded); none: unchanged.
inline Tensor<float> morph_for_axis(const Tensor<float>& keep, const std::string& v) {
    if (v == "none") return keep;
    if (v == "shrink") return morph(keep, MorphMode::dilate, 5, 2);
    if (v == "expand") return morph(keep, MorphMode::erode, 5, 2);
    throw ConfigError("mask_morph value '" + v + "' is not shrink|expand|none");
}

/// A layer selection written as "16+4".
inline std::set<std::size_t> parse_layers(const std::string& s) {
    std::set<std::size_t> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        const auto plus = s.find('+', pos);
        const std::string part = s.substr(pos, plus == std::string::npos ? std::string::npos : plus - pos);
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
            out.insert(v);
        } catch (const std::exception&) {
            throw ConfigError("layer selection '" + s + "' is not of the form 16+4");
        }
        if (plus == std::string::npos) break;
        pos = plus + 1;
    }
    if (out.empty()) throw ConfigError("empty layer selection");
    return out;
}

inline std::string layers_string(const std::set<std::size_t>& layers) {
    std::string s;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) s += (s.empty() ? "" : "+") + std::to_string(*it);
    return s;
}

/// A sweep value in its canonical text form plus the parsed payload.
struct SweepValue {
    std::string text;
    double number = 0;
};

struct SweepRow {
    std::string value;
    std::size_t image = 0;
    std::uint64_t seed = 0;
    PairMetrics metrics;
    double runtime = 0;  // seconds for this row's protection share plus both inpaints
};

struct SweepResult {
    std::vector<SweepRow> rows;  // sorted by (value order, image, seed)
    std::size_t protect_calls = 0;
};

/// Applies one axis value to the sampler and attack configs. mask_morph and
/// robustness act on the inputs instead and leave both untouched.
inline void apply_axis_value(SweepAxis axis, const SweepValue& v, SamplerConfig& sc, AttackConfig& ac) {
    switch (axis) {
        case SweepAxis::cfg_scale: sc.cfg_scale = v.number; break;
        case SweepAxis::epsilon: ac.epsilon = v.number; break;
        case SweepAxis::inference_steps: sc.inference_steps = static_cast<std::size_t>(v.number); break;
        case SweepAxis::strength: sc.strength = v.number; break;
        case SweepAxis::layer_selection: ac.layer_selection = parse_layers(v.text); break;
        case SweepAxis::mask_morph:
        case SweepAxis::robustness: break;
    }
}

/// Validates every value against its axis before any work is done.
inline void validate_sweep(const Model<float>& model, SweepAxis axis, const std::vector<SweepValue>& values,
                           const SamplerConfig& sc, const AttackConfig& ac) {
    if (values.empty()) throw ConfigError("sweep.values is empty");
    for (const auto& v : values) {
        SamplerConfig s = sc;
        AttackConfig a = ac;
        apply_axis_value(axis, v, s, a);
        if (axis == SweepAxis::inference_steps && v.number != std::floor(v.number))
            throw ConfigError("inference_steps value " + v.text + " is not an integer");
        s.validate(model.schedule.steps);
        a.validate(model.predictor.config);
        if (axis == SweepAxis::mask_morph) morph_for_axis(Tensor<float>::zeros({kImageSide, kImageSide}), v.text);
        if (axis == SweepAxis::robustness) parse_robustness(v.text);
    }
}

inline SweepResult run_sweep(const Model<float>& model, SweepAxis axis, const std::vector<SweepValue>& values,
                             const std::vector<ImageCase>& cases, const std::vector<std::uint64_t>& seeds,
                             const SamplerConfig& base_sampler, const AttackConfig& base_attack,
                             const std::function<void(const SweepRow&)>& progress = {}) {
    validate_sweep(model, axis, values, base_sampler, base_attack);
    if (seeds.empty()) throw ConfigError("sweep.seeds is empty");
    using clock = std::chrono::steady_clock;
    SweepResult out;
    const bool reuse = reuses_protection(axis);
    for (const auto& c : cases) {
        std::optional<ProtectedCase> shared;
        if (reuse) {
            shared = protect_case(model, c, base_attack);
            ++out.protect_calls;
        }
        std::vector<std::optional<InpaintMeasure>> fixed_oracle(seeds.size());
        for (std::size_t vi = 0; vi < values.size(); ++vi) {
            const auto& v = values[vi];
            SamplerConfig sc = base_sampler;
            AttackConfig ac = base_attack;
            apply_axis_value(axis, v, sc, ac);
            ProtectedCase prot;
            if (reuse) {
                prot = *shared;
            } else {
                prot = protect_case(model, c, ac);
                ++out.protect_calls;
            }
            Tensor<float> mask = c.mask, fed = prot.image;
            if (axis == SweepAxis::mask_morph) mask = morph_for_axis(c.mask, v.text);
            if (axis == SweepAxis::robustness) {
                const auto r = parse_robustness(v.text);
                if (r.kind) fed = robustness_transform(prot.image, *r.kind, r.param);
            }
            const double share = reuse ? prot.seconds / static_cast<double>(values.size() * seeds.size())
                                       : prot.seconds / static_cast<double>(seeds.size());
            // The oracle sees the clean image, so it only changes with the value
            // on axes that move the sampler or the mask.
            const bool oracle_fixed = !reuse || axis == SweepAxis::robustness;
            for (std::size_t si = 0; si < seeds.size(); ++si) {
                const auto t0 = clock::now();
                sc.seed = pair_seed(c.index, seeds[si]);
                if (!oracle_fixed || !fixed_oracle[si]) fixed_oracle[si] = measure_inpaint(model, c, c.image, mask, sc);
                const auto p = measure_inpaint(model, c, fed, mask, sc);
                SweepRow row{v.text, c.index, seeds[si], compare(*fixed_oracle[si], p), 0};
                row.runtime = share + std::chrono::duration<double>(clock::now() - t0).count();
                if (progress) progress(row);
                out.rows.push_back(std::move(row));
            }
        }
    }
    std::map<std::string, std::size_t> rank;
    for (std::size_t i = 0; i < values.size(); ++i) rank.emplace(values[i].text, i);
    std::stable_sort(out.rows.begin(), out.rows.end(), [&](const SweepRow& a, const SweepRow& b) {
        return std::tuple(rank[a.value], a.image, a.seed) < std::tuple(rank[b.value], b.image, b.seed);
    });
    return out;
}

}  // namespace decoy
