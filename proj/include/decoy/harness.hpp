#pragma once

// Command-line harness: flat dot-path JSON configs, run directories with a
// manifest, and the train / protect / inpaint / attribute / evaluate / sweep /
// render-delta commands.

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "decoy/checkpoint.hpp"
#include "decoy/experiment.hpp"
#include "decoy/training.hpp"

namespace decoy {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunConfig {
    std::uint64_t seed = 0;
    std::string checkpoint;
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    AttackConfig attack;
    std::uint64_t data_seed = kTestSeedBase;
    std::size_t data_count = 1;
    std::string prompt;  // overrides every case's prompt when set
    std::string input_image, input_mask, input_delta;
    std::string sweep_axis;
    json sweep_values = json::array();
    std::vector<std::uint64_t> sweep_seeds{0};
    std::string render_protected, render_original;
};

namespace cfgval {

[[noreturn]] inline void bad(const std::string& key, const json& v, const char* want) {
    throw ConfigError("config key '" + key + "' expects " + want + ", got " + v.dump());
}

/// Numbers, or strings of the form "a/b" (budgets are usually written 12/255).
inline double number(const std::string& key, const json& v) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        try {
            std::size_t used = 0;
            const double a = std::stod(s, &used);
            if (used == s.size()) return a;
            if (s[used] == '/') {
                std::size_t used2 = 0;
                const std::string rest = s.substr(used + 1);
                const double b = std::stod(rest, &used2);
                if (used2 == rest.size() && b != 0) return a / b;
            }
        } catch (const std::exception&) {
        }
    }
    bad(key, v, "a number");
}

inline std::uint64_t integer(const std::string& key, const json& v) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (d >= 0 && d == std::floor(d) && d < 1.8e19) return static_cast<std::uint64_t>(d);
    }
    bad(key, v, "a non-negative integer");
}

inline bool boolean(const std::string& key, const json& v) {
    if (v.is_boolean()) return v.get<bool>();
    bad(key, v, "true or false");
}

inline std::string string(const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    bad(key, v, "a string");
}

template <class E>
E choice(const std::string& key, const json& v, std::initializer_list<std::pair<const char*, E>> options) {
    const std::string s = string(key, v);
    std::string names;
    for (const auto& [n, e] : options) {
        if (s == n) return e;
        names += (names.empty() ? "" : "|") + std::string(n);
    }
    throw ConfigError("config key '" + key + "' expects one of " + names + ", got '" + s + "'");
}

}  // namespace cfgval

inline const char* name(DecoyTarget t) { return t == DecoyTarget::bos ? "bos" : "first_eos"; }
inline const char* name(BasePromptKind k) {
    switch (k) {
        case BasePromptKind::quality_tag: return "quality_tag";
        case BasePromptKind::null: return "null";
        case BasePromptKind::custom: return "custom";
    }
    return "?";
}
inline const char* name(RegionSelector r) { return r == RegionSelector::inpaint ? "inpaint" : "keep"; }
inline const char* name(Objective o) { return o == Objective::cross_attention ? "cross-attention" : "noise-pred"; }

inline Objective parse_objective(const std::string& key, const json& v) {
    return cfgval::choice<Objective>(key, v,
                                     {{"cross-attention", Objective::cross_attention},
                                      {"cross_attention", Objective::cross_attention},
                                      {"noise-pred", Objective::noise_pred},
                                      {"noise_pred", Objective::noise_pred}});
}

struct ConfigField {
    std::string key;
    std::function<json(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const json&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
    using namespace cfgval;
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto add = [&](std::string key, auto get, auto set) { f.push_back({std::move(key), get, set}); };
#define DECOY_UINT(KEY, MEMBER)                                                   \
    add(KEY, [](const RunConfig& c) { return json(c.MEMBER); },                   \
        [](RunConfig& c, const std::string& k, const json& v) { c.MEMBER = static_cast<decltype(c.MEMBER)>(integer(k, v)); })
#define DECOY_NUM(KEY, MEMBER)                                  \
    add(KEY, [](const RunConfig& c) { return json(c.MEMBER); }, \
        [](RunConfig& c, const std::string& k, const json& v) { c.MEMBER = number(k, v); })
#define DECOY_BOOL(KEY, MEMBER)                                 \
    add(KEY, [](const RunConfig& c) { return json(c.MEMBER); }, \
        [](RunConfig& c, const std::string& k, const json& v) { c.MEMBER = boolean(k, v); })
#define DECOY_STR(KEY, MEMBER)                                  \
    add(KEY, [](const RunConfig& c) { return json(c.MEMBER); }, \
        [](RunConfig& c, const std::string& k, const json& v) { c.MEMBER = string(k, v); })

        DECOY_UINT("seed", seed);
        DECOY_STR("checkpoint", checkpoint);

        DECOY_UINT("model.seed", model.seed);
        DECOY_UINT("model.encoder.seq_len", model.encoder.seq_len);
        DECOY_UINT("model.encoder.width", model.encoder.width);
        DECOY_UINT("model.encoder.heads", model.encoder.heads);
        DECOY_UINT("model.encoder.blocks", model.encoder.blocks);
        DECOY_UINT("model.encoder.mlp_mult", model.encoder.mlp_mult);
        DECOY_UINT("model.predictor.width", model.predictor.width);
        DECOY_UINT("model.predictor.mlp_mult", model.predictor.mlp_mult);
        DECOY_NUM("model.predictor.ca_logit_scale", model.predictor.ca_logit_scale);
        DECOY_BOOL("model.predictor.stage_context", model.predictor.stage_context);
        DECOY_UINT("model.schedule.steps", model.schedule_steps);
        DECOY_NUM("model.schedule.beta_start", model.beta_start);
        DECOY_NUM("model.schedule.beta_end", model.beta_end);
        DECOY_UINT("model.codec_seed", model.codec_seed);
        DECOY_NUM("model.codec_detail_gain", model.codec_detail_gain);

        DECOY_UINT("train.steps", train.steps);
        DECOY_UINT("train.batch", train.batch);
        DECOY_NUM("train.lr", train.lr);
        DECOY_UINT("train.warmup", train.warmup);
        DECOY_NUM("train.lr_floor", train.lr_floor);
        DECOY_NUM("train.null_prompt_prob", train.null_prompt_prob);
        DECOY_NUM("train.full_prompt_prob", train.full_prompt_prob);
        DECOY_NUM("train.ema_decay", train.ema_decay);
        DECOY_NUM("train.loss_threshold", train.loss_threshold);
        DECOY_UINT("train.data_seed", train.data_seed);

        DECOY_UINT("sampler.inference_steps", sampler.inference_steps);
        DECOY_NUM("sampler.cfg_scale", sampler.cfg_scale);
        DECOY_NUM("sampler.strength", sampler.strength);

        DECOY_NUM("attack.epsilon", attack.epsilon);
        DECOY_NUM("attack.step_size", attack.step_size);
        DECOY_UINT("attack.iterations", attack.iterations);
        DECOY_UINT("attack.grad_samples", attack.grad_samples);
        add("attack.layer_selection", [](const RunConfig& c) { return json(c.attack.layer_selection); },
            [](RunConfig& c, const std::string& k, const json& v) {
                if (v.is_string()) {
                    c.attack.layer_selection = parse_layers(v.get<std::string>());
                } else if (v.is_array()) {
                    std::set<std::size_t> s;
                    for (const auto& e : v) s.insert(integer(k, e));
                    c.attack.layer_selection = s;
                } else {
                    bad(k, v, "an array of resolutions or a string like 16+4");
                }
            });
        add("attack.decoy_target", [](const RunConfig& c) { return json(name(c.attack.decoy_target)); },
            [](RunConfig& c, const std::string& k, const json& v) {
                c.attack.decoy_target =
                    choice<DecoyTarget>(k, v, {{"bos", DecoyTarget::bos}, {"first_eos", DecoyTarget::first_eos}});
            });
        add("attack.base_prompt", [](const RunConfig& c) { return json(name(c.attack.base_prompt)); },
            [](RunConfig& c, const std::string& k, const json& v) {
                c.attack.base_prompt = choice<BasePromptKind>(k, v,
                                                              {{"quality_tag", BasePromptKind::quality_tag},
                                                               {"null", BasePromptKind::null},
                                                               {"custom", BasePromptKind::custom}});
            });
        DECOY_STR("attack.custom_prompt", attack.custom_prompt);
        add("attack.region", [](const RunConfig& c) { return json(name(c.attack.region)); },
            [](RunConfig& c, const std::string& k, const json& v) {
                c.attack.region =
                    choice<RegionSelector>(k, v, {{"inpaint", RegionSelector::inpaint}, {"keep", RegionSelector::keep}});
            });
        DECOY_BOOL("attack.stop_grad_target", attack.stop_grad_target);
        DECOY_NUM("attack.bias", attack.bias);
        DECOY_UINT("attack.probe_count", attack.probe_count);
        DECOY_UINT("attack.probe_every", attack.probe_every);
        add("attack.objective", [](const RunConfig& c) { return json(name(c.attack.objective)); },
            [](RunConfig& c, const std::string& k, const json& v) { c.attack.objective = parse_objective(k, v); });
        DECOY_UINT("attack.noise_pred_steps", attack.noise_pred_steps);

        DECOY_UINT("data.seed", data_seed);
        DECOY_UINT("data.count", data_count);
        DECOY_STR("prompt", prompt);
        DECOY_STR("input.image", input_image);
        DECOY_STR("input.mask", input_mask);
        DECOY_STR("input.delta", input_delta);

        DECOY_STR("sweep.axis", sweep_axis);
        add("sweep.values", [](const RunConfig& c) { return c.sweep_values; },
            [](RunConfig& c, const std::string& k, const json& v) {
                if (!v.is_array()) bad(k, v, "an array");
                c.sweep_values = v;
            });
        add("sweep.seeds", [](const RunConfig& c) { return json(c.sweep_seeds); },
            [](RunConfig& c, const std::string& k, const json& v) {
                if (!v.is_array()) bad(k, v, "an array of seeds");
                c.sweep_seeds.clear();
                for (const auto& e : v) c.sweep_seeds.push_back(integer(k, e));
            });

        DECOY_STR("render.protected", render_protected);
        DECOY_STR("render.original", render_original);
#undef DECOY_UINT
#undef DECOY_NUM
#undef DECOY_BOOL
#undef DECOY_STR
        return f;
    }();
    return fields;
}

inline void set_config_key(RunConfig& cfg, const std::string& key, const json& value) {
    for (const auto& f : config_fields())
        if (f.key == key) return f.set(cfg, key, value);
    throw ConfigError("unknown config key '" + key + "'");
}

inline json config_to_json(const RunConfig& cfg) {
    json out = json::object();
    for (const auto& f : config_fields()) out[f.key] = f.get(cfg);
    return out;
}

/// Nested objects are flattened with dots, so {"attack": {"epsilon": 1}} and
/// {"attack.epsilon": 1} mean the same thing.
inline void apply_config_json(RunConfig& cfg, const json& j, const std::string& prefix = "") {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object())
            apply_config_json(cfg, it.value(), key);
        else
            set_config_key(cfg, key, it.value());
    }
}

/// key=value; the value is read as JSON when it parses, else as a bare string.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    set_config_key(cfg, key, v);
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
    apply_config_json(cfg, j);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    return cfg;
}

inline std::string fmt6(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

class Csv {
public:
    explicit Csv(std::vector<std::string> header) : cols_(header.size()) { line(header); }

    Csv& cell(const std::string& s) {
        row_.push_back(s);
        return *this;
    }
    Csv& cell(double v) { return cell(fmt6(v)); }
    Csv& cell(std::size_t v) { return cell(std::to_string(v)); }
    void end_row() {
        if (row_.size() != cols_)
            throw Error("csv row has " + std::to_string(row_.size()) + " cells, header " + std::to_string(cols_));
        line(row_);
        row_.clear();
    }
    const std::string& text() const { return text_; }

private:
    void line(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
        text_ += "\n";
    }
    std::size_t cols_;
    std::vector<std::string> row_;
    std::string text_;
};

inline long peak_rss_kb() {
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    return ru.ru_maxrss;
}

inline double cpu_seconds() {
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    return static_cast<double>(ru.ru_utime.tv_sec + ru.ru_stime.tv_sec) +
           static_cast<double>(ru.ru_utime.tv_usec + ru.ru_stime.tv_usec) * 1e-6;
}

/// One invocation's output directory and manifest.
class Run {
public:
    Run(std::string command, const fs::path& root, const RunConfig& cfg)
        : command_(std::move(command)), config_(cfg), start_(std::chrono::steady_clock::now()), cpu0_(cpu_seconds()) {
        char stamp[32];
        const std::time_t now = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&now, &tm);
        std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
        const std::string base = std::string(stamp) + "-seed" + std::to_string(cfg.seed);
        dir_ = root / base;
        for (int k = 2; fs::exists(dir_); ++k) dir_ = root / (base + "-" + std::to_string(k));
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }
    json& extra() { return extra_; }
    std::size_t protect_calls = 0;
    std::string checkpoint_hash;
    std::optional<std::pair<std::uint64_t, std::uint64_t>> corpus_seeds;

    fs::path path(const std::string& rel) {
        outputs_.push_back(rel);
        return dir_ / rel;
    }
    void text(const std::string& rel, const std::string& content) { image::write_text(path(rel).string(), content); }
    void tensor(const std::string& rel, const Tensor<float>& t) { tnsr::save(path(rel).string(), t); }
    void ppm(const std::string& rel, const Tensor<float>& t) { image::write_ppm(path(rel).string(), t); }
    void pgm(const std::string& rel, const Tensor<float>& t) { image::write_pgm(path(rel).string(), t); }
    void note_output(const std::string& rel) { outputs_.push_back(rel); }

    json manifest() const {
        json m = {{"command", command_},
                  {"config", config_to_json(config_)},
                  {"checkpoint_hash", checkpoint_hash.empty() ? json(nullptr) : json(checkpoint_hash)},
                  {"corpus_seed_range", corpus_seeds ? json::array({corpus_seeds->first, corpus_seeds->second})
                                                     : json(nullptr)},
                  {"outputs", outputs_},
                  {"protect_calls", protect_calls},
                  {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()},
                  {"cpu_time_s", cpu_seconds() - cpu0_},
                  {"peak_rss_kb", peak_rss_kb()}};
        for (auto it = extra_.begin(); it != extra_.end(); ++it) m[it.key()] = it.value();
        return m;
    }

    void finish() { image::write_text((dir_ / "manifest.json").string(), manifest().dump(2) + "\n"); }

private:
    std::string command_;
    RunConfig config_;
    fs::path dir_;
    std::vector<std::string> outputs_;
    json extra_ = json::object();
    std::chrono::steady_clock::time_point start_;
    double cpu0_;
};

inline std::string stem(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    return buf;
}

inline Tensor<float> load_image_file(const std::string& path) {
    if (path.ends_with(".tnsr")) return tnsr::load(path);
    return image::read_ppm(path);
}

inline void check_image_shape(const Tensor<float>& img, const std::string& what) {
    if (img.shape() != Shape{kImageSide, kImageSide, kImageChannels})
        throw ShapeError(what + " has shape " + to_string(img.shape()) + ", expected [16,16,3]");
}

/// Corpus cases from data.seed/data.count, or one case from input.image and
/// input.mask. input.delta (a protect run directory) perturbs every case.
inline std::vector<ImageCase> load_cases(const RunConfig& cfg, Run& run) {
    std::vector<ImageCase> cases;
    if (!cfg.input_image.empty()) {
        if (cfg.input_mask.empty()) throw ConfigError("input.image needs input.mask");
        ImageCase c;
        c.image = load_image_file(cfg.input_image);
        check_image_shape(c.image, cfg.input_image);
        c.mask = image::read_pgm_mask(cfg.input_mask);
        if (c.mask.shape() != Shape{kImageSide, kImageSide})
            throw ShapeError(cfg.input_mask + " has shape " + to_string(c.mask.shape()) + ", expected [16,16]");
        c.prompt = cfg.prompt;
        cases.push_back(std::move(c));
    } else {
        if (cfg.data_count < 1) throw ConfigError("data.count must be at least 1");
        cases = test_cases(cfg.data_seed, cfg.data_count);
        run.corpus_seeds = {cfg.data_seed, cfg.data_seed + cfg.data_count - 1};
        if (!cfg.prompt.empty())
            for (auto& c : cases) c.prompt = cfg.prompt;
    }
    if (!cfg.input_delta.empty())
        for (auto& c : cases) {
            const fs::path p = fs::path(cfg.input_delta) / (stem(c.index) + "_delta.tnsr");
            if (!fs::exists(p)) throw ConfigError("input.delta: missing " + p.string());
            const Tensor<float> d = tnsr::load(p.string());
            check_image_shape(d, p.string());
            c.image = apply_perturbation(c.image, d);
        }
    return cases;
}

inline Model<float> load_model(const RunConfig& cfg, Run& run) {
    if (cfg.checkpoint.empty()) throw ConfigError("config key 'checkpoint' is required for this command");
    Model<float> m = load_checkpoint(cfg.checkpoint);
    run.checkpoint_hash = model_hash(m);
    return m;
}

inline SamplerConfig sampler_for(const RunConfig& cfg, const ImageCase& c) {
    SamplerConfig sc = cfg.sampler;
    sc.seed = pair_seed(c.index, cfg.seed);
    return sc;
}

inline AttackConfig attack_for(const RunConfig& cfg) {
    AttackConfig ac = cfg.attack;
    ac.seed = cfg.seed;
    return ac;
}

inline void cmd_train(const RunConfig& cfg, Run& run) {
    ModelConfig mc = cfg.model;
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    Model<float> model = init_model<float>(mc);
    const auto report = train(model, tc, [&](std::size_t step, double loss, double ema) {
        if ((step + 1) % 1000 == 0 || step + 1 == tc.steps) {
            std::printf("step %zu loss %.6f ema %.6f\n", step + 1, loss, ema);
            std::fflush(stdout);
        }
    });
    Csv csv({"step", "loss", "ema"});
    for (std::size_t i = 0; i < report.loss.size(); ++i) csv.cell(i + 1).cell(report.loss[i]).cell(report.ema[i]).end_row();
    run.text("train_loss.csv", csv.text());
    const json summary = {{"final_ema", report.final_ema},
                          {"below_threshold", report.below_threshold},
                          {"steps", tc.steps},
                          {"data_seed_range", {tc.data_seed, tc.data_seed + tc.steps * tc.batch - 1}}};
    run.checkpoint_hash = save_checkpoint(model, run.dir() / "checkpoint", {{"training", summary}});
    model.visit([&](const std::string& n, const Tensor<float>&) { run.note_output("checkpoint/" + tensor_file_name(n)); });
    run.note_output("checkpoint/manifest.json");
    run.extra()["training"] = summary;
}

inline void cmd_protect(const RunConfig& cfg, Run& run) {
    const Model<float> model = load_model(cfg, run);
    const auto cases = load_cases(cfg, run);
    Csv csv({"image", "seed", "probe_initial", "probe_final", "probe_reduction", "max_abs_delta"});
    json seconds = json::array();
    for (const auto& c : cases) {
        const auto pc = protect_case(model, c, attack_for(cfg));
        ++run.protect_calls;
        seconds.push_back(pc.seconds);
        const std::string s = stem(c.index);
        run.tensor(s + "_delta.tnsr", pc.noise.delta);
        run.tensor(s + "_original.tnsr", c.image);
        run.tensor(s + "_protected.tnsr", pc.image);
        run.ppm(s + "_protected.ppm", pc.image);
        Csv probes({"iteration", "loss", "best"});
        for (const auto& p : pc.noise.probes) probes.cell(p.iteration).cell(p.loss).cell(p.best).end_row();
        run.text(s + "_probes.csv", probes.text());
        Csv hist({"iteration", "loss"});
        for (std::size_t i = 0; i < pc.noise.loss_history.size(); ++i) hist.cell(i).cell(pc.noise.loss_history[i]).end_row();
        run.text(s + "_loss.csv", hist.text());
        double mx = 0;
        for (float v : pc.noise.delta.data()) mx = std::max(mx, static_cast<double>(std::abs(v)));
        const double a = pc.noise.initial_probe(), b = pc.noise.final_probe();
        csv.cell(c.index).cell(std::to_string(c.seed)).cell(a).cell(b).cell(a > 0 ? 1 - b / a : 0.0).cell(mx).end_row();
    }
    run.text("protect.csv", csv.text());
    run.extra()["protect_seconds"] = seconds;
    run.extra()["protect_seconds_per_iteration"] =
        seconds.empty() ? 0.0 : seconds[0].get<double>() / static_cast<double>(cfg.attack.iterations);
}

inline void cmd_inpaint(const RunConfig& cfg, Run& run) {
    const Model<float> model = load_model(cfg, run);
    const auto cases = load_cases(cfg, run);
    Csv csv({"image", "seed", "sampler_seed", "color_dominance"});
    for (const auto& c : cases) {
        const SamplerConfig sc = sampler_for(cfg, c);
        const auto res = sample_inpaint(model, c.image, c.mask, model.tokens(c.prompt), sc);
        const std::string s = stem(c.index);
        run.tensor(s + "_inpaint.tnsr", res.image);
        run.ppm(s + "_inpaint.ppm", res.image);
        const double dom = c.color ? color_dominance(res.image, c.mask, *c.color) : std::nan("");
        csv.cell(c.index).cell(std::to_string(c.seed)).cell(std::to_string(sc.seed)).cell(dom).end_row();
    }
    run.text("inpaint.csv", csv.text());
}

inline const char* name(TokenClass c) {
    switch (c) {
        case TokenClass::content: return "content";
        case TokenClass::bos: return "bos";
        case TokenClass::eos: return "eos";
    }
    return "?";
}

inline void cmd_attribute(const RunConfig& cfg, Run& run) {
    const Model<float> model = load_model(cfg, run);
    const auto cases = load_cases(cfg, run);
    Csv summary({"image", "seed", "content_mass_inpaint", "bos_mass_inpaint", "eos_mass_inpaint"});
    for (const auto& c : cases) {
        const TokenSequence prompt = model.tokens(c.prompt);
        const auto res = sample_inpaint(model, c.image, c.mask, prompt, sampler_for(cfg, c), true);
        const auto attr = attribute(res.traces, prompt.prompt_len);
        const auto masses = class_masses(attr, downsample_mask(c.mask));
        const std::string s = stem(c.index);
        Csv raw({"token", "class", "row", "col", "mass"});
        for (std::size_t k = 0; k < attr.tokens; ++k) {
            double mx = 0;
            for (std::size_t p = 0; p < attr.positions; ++p) {
                mx = std::max(mx, attr.at(k, p));
                raw.cell(k).cell(name(token_class(k, prompt.prompt_len))).cell(p / kLatentSide).cell(p % kLatentSide)
                    .cell(attr.at(k, p)).end_row();
            }
            std::vector<float> px(attr.positions);
            for (std::size_t p = 0; p < attr.positions; ++p) px[p] = mx > 0 ? static_cast<float>(attr.at(k, p) / mx) : 0;
            run.pgm(s + "_token" + std::to_string(k) + ".pgm", Tensor<float>({kLatentSide, kLatentSide}, std::move(px)));
        }
        run.text(s + "_attribution.csv", raw.text());
        run.ppm(s + "_inpaint.ppm", res.image);
        summary.cell(c.index).cell(std::to_string(c.seed)).cell(masses.content_mass_inpaint).cell(masses.bos_mass_inpaint)
            .cell(masses.eos_mass_inpaint).end_row();
    }
    run.text("attribution.csv", summary.text());
}

inline void cmd_evaluate(const RunConfig& cfg, Run& run) {
    const Model<float> model = load_model(cfg, run);
    const auto cases = load_cases(cfg, run);
    Csv csv({"image", "seed", "content_mass_oracle", "content_mass_protected", "content_mass_delta", "bos_mass_oracle",
             "bos_mass_protected", "eos_mass_oracle", "eos_mass_protected", "psnr_vs_oracle", "mse_vs_oracle",
             "color_dominance_oracle", "color_dominance_protected", "probe_initial", "probe_final"});
    for (const auto& c : cases) {
        const auto pc = protect_case(model, c, attack_for(cfg));
        ++run.protect_calls;
        const SamplerConfig sc = sampler_for(cfg, c);
        const auto o = measure_inpaint(model, c, c.image, c.mask, sc);
        const auto p = measure_inpaint(model, c, pc.image, c.mask, sc);
        const auto m = compare(o, p);
        const std::string s = stem(c.index);
        run.ppm(s + "_oracle.ppm", o.image);
        run.ppm(s + "_protected_inpaint.ppm", p.image);
        run.tensor(s + "_delta.tnsr", pc.noise.delta);
        csv.cell(c.index).cell(std::to_string(c.seed)).cell(m.oracle.content_mass_inpaint)
            .cell(m.protected_.content_mass_inpaint)
            .cell(m.protected_.content_mass_inpaint - m.oracle.content_mass_inpaint).cell(m.oracle.bos_mass_inpaint)
            .cell(m.protected_.bos_mass_inpaint).cell(m.oracle.eos_mass_inpaint).cell(m.protected_.eos_mass_inpaint)
            .cell(m.psnr).cell(m.mse).cell(m.dominance_oracle).cell(m.dominance_protected)
            .cell(pc.noise.initial_probe()).cell(pc.noise.final_probe()).end_row();
    }
    run.text("metrics.csv", csv.text());
}

inline std::vector<SweepValue> sweep_values(SweepAxis axis, const json& values) {
    std::vector<SweepValue> out;
    for (const auto& v : values) {
        SweepValue sv;
        switch (axis) {
            case SweepAxis::layer_selection:
                if (v.is_array()) {
                    std::set<std::size_t> s;
                    for (const auto& e : v) s.insert(cfgval::integer("sweep.values", e));
                    sv.text = layers_string(s);
                } else {
                    sv.text = layers_string(parse_layers(cfgval::string("sweep.values", v)));
                }
                break;
            case SweepAxis::mask_morph:
            case SweepAxis::robustness: sv.text = cfgval::string("sweep.values", v); break;
            default:
                sv.number = cfgval::number("sweep.values", v);
                sv.text = axis == SweepAxis::inference_steps ? std::to_string(static_cast<long long>(sv.number))
                                                             : fmt6(sv.number);
        }
        out.push_back(sv);
    }
    return out;
}

/// The toy schedule runs 10/25/50 sampler steps where the full-size setting
/// runs 50/75/100; the sweep CSV carries the mapped value alongside.
inline std::string reference_value(SweepAxis axis, const SweepValue& v) {
    if (axis != SweepAxis::inference_steps) return v.text;
    if (v.number == 10) return "50";
    if (v.number == 25) return "75";
    if (v.number == 50) return "100";
    return "";
}

inline void cmd_sweep(const RunConfig& cfg, Run& run) {
    if (cfg.sweep_axis.empty()) throw ConfigError("config key 'sweep.axis' is required for sweep");
    const SweepAxis axis = parse_axis(cfg.sweep_axis);
    const auto values = sweep_values(axis, cfg.sweep_values);
    const Model<float> model = load_model(cfg, run);
    const auto cases = load_cases(cfg, run);
    const AttackConfig ac = attack_for(cfg);
    SamplerConfig sc = cfg.sampler;
    validate_sweep(model, axis, values, sc, ac);
    const auto result = run_sweep(model, axis, values, cases, cfg.sweep_seeds, sc, ac, [](const SweepRow& r) {
        std::printf("%s image %zu seed %llu content %.4f -> %.4f\n", r.value.c_str(), r.image,
                    static_cast<unsigned long long>(r.seed), r.metrics.oracle.content_mass_inpaint,
                    r.metrics.protected_.content_mass_inpaint);
        std::fflush(stdout);
    });
    run.protect_calls = result.protect_calls;
    Csv csv({"axis", "value", "reference_value", "image", "seed", "content_mass_oracle", "content_mass_protected", "psnr",
             "runtime_s"});
    std::map<std::string, SweepValue> by_text;
    for (const auto& v : values) by_text.emplace(v.text, v);
    for (const auto& r : result.rows)
        csv.cell(name(axis)).cell(r.value).cell(reference_value(axis, by_text.at(r.value))).cell(r.image)
            .cell(std::to_string(r.seed)).cell(r.metrics.oracle.content_mass_inpaint)
            .cell(r.metrics.protected_.content_mass_inpaint).cell(r.metrics.psnr).cell(r.runtime).end_row();
    run.text("sweep.csv", csv.text());
}

/// 0.5 + 0.5 delta / max|delta| per channel value; mid-grey when delta is 0.
inline Tensor<float> render_delta(const Tensor<float>& prot, const Tensor<float>& orig, double* max_abs = nullptr) {
    if (prot.shape() != orig.shape())
        throw ShapeError("render-delta: protected " + to_string(prot.shape()) + " vs original " + to_string(orig.shape()));
    float mx = 0;
    for (std::size_t i = 0; i < prot.numel(); ++i) mx = std::max(mx, std::abs(prot[i] - orig[i]));
    std::vector<float> out(prot.numel(), 0.5f);
    if (mx > 0)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5f + 0.5f * (prot[i] - orig[i]) / mx;
    if (max_abs) *max_abs = mx;
    return Tensor<float>(prot.shape(), std::move(out));
}

inline void cmd_render_delta(const RunConfig& cfg, Run& run) {
    if (cfg.render_protected.empty() || cfg.render_original.empty())
        throw ConfigError("render-delta needs render.protected and render.original");
    const Tensor<float> p = load_image_file(cfg.render_protected), o = load_image_file(cfg.render_original);
    double mx = 0;
    const Tensor<float> img = render_delta(p, o, &mx);
    run.ppm("delta.ppm", img);
    run.extra()["max_abs_delta"] = mx;
    std::printf("max_abs_delta %.9g\n", mx);
}

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"train",    "protect", "inpaint",     "attribute",
                                                "evaluate", "sweep",   "render-delta"};
    return names;
}

inline void dispatch(const std::string& command, const RunConfig& cfg, Run& run) {
    if (command == "train") return cmd_train(cfg, run);
    if (command == "protect") return cmd_protect(cfg, run);
    if (command == "inpaint") return cmd_inpaint(cfg, run);
    if (command == "attribute") return cmd_attribute(cfg, run);
    if (command == "evaluate") return cmd_evaluate(cfg, run);
    if (command == "sweep") return cmd_sweep(cfg, run);
    if (command == "render-delta") return cmd_render_delta(cfg, run);
    throw ConfigError("unknown command '" + command + "'");
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// {"error":"config|runtime","exit":N,"message":"..."} on one line.
inline std::string error_line(const char* kind, int code, const std::string& message) {
    return json{{"error", kind}, {"exit", code}, {"message", message}}.dump();
}

/// Entry point of decoyctl. `run_dir` receives the run directory on success.
inline int cli_main(int argc, char** argv, fs::path* run_dir = nullptr, std::ostream& err = std::cerr) {
    CLI::App app{"decoyctl: protective perturbations against prompt-driven inpainting"};
    std::string command, config_path, out;
    std::vector<std::string> overrides;
    std::string objective;
    app.add_option("command", command, "train|protect|inpaint|attribute|evaluate|sweep|render-delta")->required();
    app.add_option("--config", config_path, "flat JSON config")->required();
    app.add_option("--set", overrides, "key=value override (repeatable)");
    app.add_option("--out", out, "output root (default: $DECOY_OUT)");
    app.add_option("--objective", objective, "cross-attention (default) or noise-pred");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        err << error_line("config", kExitConfig, e.what()) << "\n";
        return kExitConfig;
    }
    try {
        if (std::find(command_names().begin(), command_names().end(), command) == command_names().end())
            throw ConfigError("unknown command '" + command + "'");
        RunConfig cfg = load_run_config(config_path, overrides);
        if (!objective.empty()) cfg.attack.objective = parse_objective("--objective", objective);
        if (out.empty()) {
            const char* env = std::getenv("DECOY_OUT");
            if (!env || !*env) throw ConfigError("no output root: pass --out or set DECOY_OUT");
            out = env;
        }
        Run run(command, out, cfg);
        dispatch(command, cfg, run);
        run.finish();
        std::printf("run_dir %s\n", run.dir().string().c_str());
        if (run_dir) *run_dir = run.dir();
        return kExitOk;
    } catch (const ConfigError& e) {
        err << error_line("config", kExitConfig, e.what()) << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << error_line("runtime", kExitRuntime, e.what()) << "\n";
        return kExitRuntime;
    }
}

}  // namespace decoy
