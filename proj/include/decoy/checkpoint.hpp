#pragma once

// Checkpoint directory: manifest.json plus one TNSR file per named tensor.

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "decoy/model.hpp"
#include "decoy/tnsr.hpp"

namespace decoy {

inline constexpr const char* kCheckpointFormat = "decoy-checkpoint";

/// 64-bit FNV-1a.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ull;
};

/// Hash over tensor names, shapes and raw little-endian payloads, in visit order.
inline std::string model_hash(const Model<float>& model) {
    Fnv1a h;
    model.visit([&](const std::string& name, const Tensor<float>& t) {
        std::ostringstream os;
        tnsr::write(os, t);
        h.update(name);
        h.update(os.str());
    });
    return h.hex();
}

inline std::string tensor_file_name(const std::string& name) { return name + ".tnsr"; }

inline nlohmann::json model_manifest(const Model<float>& model) {
    const auto& c = model.config;
    nlohmann::json tensors = nlohmann::json::array();
    model.visit([&](const std::string& name, const Tensor<float>& t) {
        tensors.push_back({{"name", name}, {"file", tensor_file_name(name)}, {"shape", t.shape()}});
    });
    return {{"format", kCheckpointFormat},
            {"version", 1},
            {"vocabulary", model.vocab.tokens()},
            {"encoder",
             {{"seq_len", c.encoder.seq_len},
              {"width", c.encoder.width},
              {"heads", c.encoder.heads},
              {"blocks", c.encoder.blocks},
              {"mlp_mult", c.encoder.mlp_mult}}},
            {"predictor",
             {{"width", c.predictor.width},
              {"mlp_mult", c.predictor.mlp_mult},
              {"latent_channels", c.predictor.latent_channels},
              {"grid", c.predictor.grid},
              {"ca_logit_scale", c.predictor.ca_logit_scale},
              {"stage_context", c.predictor.stage_context}}},
            {"schedule", {{"steps", c.schedule_steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
            {"codec_seed", c.codec_seed},
            {"codec_detail_gain", c.codec_detail_gain},
            {"seed", c.seed},
            {"trained", model.trained},
            {"hash", model_hash(model)},
            {"tensors", tensors}};
}

/// Writes the checkpoint into dir and returns its hash. `extra` is merged
/// into the manifest (training report and the like).
inline std::string save_checkpoint(const Model<float>& model, const std::filesystem::path& dir,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    model.visit([&](const std::string& name, const Tensor<float>& t) { tnsr::save((dir / tensor_file_name(name)).string(), t); });
    nlohmann::json manifest = model_manifest(model);
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    os << manifest.dump(2) << "\n";
    if (!os) throw Error("cannot write checkpoint manifest in " + dir.string());
    return manifest["hash"].get<std::string>();
}

inline Model<float> load_checkpoint(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream is(path);
    if (!is) throw ConfigError("checkpoint manifest not found: " + path.string());
    nlohmann::json m;
    try {
        is >> m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    if (m.value("format", "") != kCheckpointFormat) throw ConfigError(path.string() + " is not a checkpoint manifest");
    try {
        ModelConfig cfg;
        const auto& enc = m.at("encoder");
        cfg.encoder.seq_len = enc.at("seq_len");
        cfg.encoder.width = enc.at("width");
        cfg.encoder.heads = enc.at("heads");
        cfg.encoder.blocks = enc.at("blocks");
        cfg.encoder.mlp_mult = enc.at("mlp_mult");
        const auto& pred = m.at("predictor");
        cfg.predictor.width = pred.at("width");
        cfg.predictor.mlp_mult = pred.at("mlp_mult");
        cfg.predictor.latent_channels = pred.at("latent_channels");
        cfg.predictor.grid = pred.at("grid");
        cfg.predictor.ca_logit_scale = pred.at("ca_logit_scale");
        cfg.predictor.stage_context = pred.at("stage_context");
        cfg.schedule_steps = m.at("schedule").at("steps");
        cfg.beta_start = m.at("schedule").at("beta_start");
        cfg.beta_end = m.at("schedule").at("beta_end");
        cfg.codec_seed = m.at("codec_seed");
        cfg.codec_detail_gain = m.at("codec_detail_gain");
        cfg.seed = m.at("seed");

        Model<float> model = init_model<float>(cfg);
        model.vocab = Vocabulary(m.at("vocabulary").get<std::vector<std::string>>());
        model.visit([&](const std::string& name, Tensor<float>& t) {
            Tensor<float> loaded = tnsr::load((dir / tensor_file_name(name)).string());
            if (loaded.shape() != t.shape())
                throw ConfigError("checkpoint tensor " + name + " has shape " + to_string(loaded.shape()) +
                                  ", expected " + to_string(t.shape()));
            t = loaded;
        });
        model.trained = m.at("trained").get<bool>();
        const std::string want = m.at("hash");
        if (model_hash(model) != want) throw ConfigError("checkpoint hash mismatch in " + dir.string());
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace decoy
