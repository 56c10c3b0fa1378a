#pragma once

// Procedural captioned corpus: one coloured shape on a flat background, with
// the shape's bounding box as the inpainting region.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "decoy/diffusion.hpp"
#include "decoy/image_io.hpp"
#include "decoy/random.hpp"

namespace decoy {

enum class ShapeKind { circle, square, triangle, cross };
enum class Color { red, green, blue, yellow };

inline constexpr std::array<ShapeKind, 4> kShapeKinds{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle,
                                                      ShapeKind::cross};
inline constexpr std::array<Color, 4> kColors{Color::red, Color::green, Color::blue, Color::yellow};

inline const char* name(ShapeKind k) {
    switch (k) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::cross: return "cross";
    }
    return "?";
}

inline const char* name(Color c) {
    switch (c) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::blue: return "blue";
        case Color::yellow: return "yellow";
    }
    return "?";
}

inline std::array<float, 3> rgb(Color c) {
    switch (c) {
        case Color::red: return {1, 0, 0};
        case Color::green: return {0, 1, 0};
        case Color::blue: return {0, 0, 1};
        case Color::yellow: return {1, 1, 0};
    }
    return {0, 0, 0};
}

inline constexpr int kMinShapeSize = 4;
inline constexpr int kMaxShapeSize = 10;

struct ShapeScene {
    Color background = Color::blue;
    ShapeKind kind = ShapeKind::square;
    Color color = Color::red;
    int x0 = 0, y0 = 0;  // top-left of the square bounding box
    int size = kMinShapeSize;
};

/// Pixel (row, col) of a size x size box, relative to its top-left corner.
inline bool shape_covers(ShapeKind kind, int size, int row, int col) {
    const double s = size, cy = row + 0.5 - s / 2, cx = col + 0.5 - s / 2;
    switch (kind) {
        case ShapeKind::square: return true;
        case ShapeKind::circle: return cx * cx + cy * cy <= s * s / 4;
        case ShapeKind::triangle: return std::abs(cx) <= (row + 1) / 2.0;
        case ShapeKind::cross: {
            const double half = std::max(2, static_cast<int>(std::lround(s / 3))) / 2.0;
            return std::abs(cx) <= half || std::abs(cy) <= half;
        }
    }
    return false;
}

inline Tensor<float> render(const ShapeScene& scene) {
    const int n = static_cast<int>(kImageSide);
    if (scene.size < 1 || scene.x0 < 0 || scene.y0 < 0 || scene.x0 + scene.size > n || scene.y0 + scene.size > n)
        throw ConfigError("shape box (" + std::to_string(scene.x0) + "," + std::to_string(scene.y0) + ") size " +
                          std::to_string(scene.size) + " leaves the " + std::to_string(n) + "x" + std::to_string(n) +
                          " image");
    const auto bg = rgb(scene.background), fg = rgb(scene.color);
    std::vector<float> px(kImageSide * kImageSide * kImageChannels);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const int r = y - scene.y0, c = x - scene.x0;
            const bool in = r >= 0 && c >= 0 && r < scene.size && c < scene.size &&
                            shape_covers(scene.kind, scene.size, r, c);
            const auto& col = in ? fg : bg;
            for (std::size_t k = 0; k < 3; ++k) px[(y * n + x) * 3 + k] = col[k];
        }
    return Tensor<float>({kImageSide, kImageSide, kImageChannels}, std::move(px));
}

/// 1 outside the bounding box (keep), 0 inside (inpaint).
inline Tensor<float> box_mask(const ShapeScene& scene) {
    const int n = static_cast<int>(kImageSide);
    std::vector<float> m(kImageSide * kImageSide, 1.0f);
    for (int y = scene.y0; y < scene.y0 + scene.size; ++y)
        for (int x = scene.x0; x < scene.x0 + scene.size; ++x) m[y * n + x] = 0.0f;
    return Tensor<float>({kImageSide, kImageSide}, std::move(m));
}

struct CaptionedExample {
    std::uint64_t seed = 0;
    ShapeScene scene;
    Tensor<float> image;  // [16,16,3] in [0,1]
    Tensor<float> mask;   // [16,16], 1 = keep
    std::string prompt_full;
    std::string prompt_mask;
};

inline ShapeScene sample_scene(Rng& rng) {
    ShapeScene s;
    s.kind = kShapeKinds[uniform_int(rng, 0, 3)];
    s.color = kColors[uniform_int(rng, 0, 3)];
    int bg = uniform_int(rng, 0, 2);
    if (bg >= static_cast<int>(s.color)) ++bg;
    s.background = kColors[bg];
    s.size = uniform_int(rng, kMinShapeSize, kMaxShapeSize);
    s.x0 = uniform_int(rng, 0, static_cast<int>(kImageSide) - s.size);
    s.y0 = uniform_int(rng, 0, static_cast<int>(kImageSide) - s.size);
    return s;
}

inline CaptionedExample make_example(std::uint64_t seed) {
    Rng rng = make_rng(seed, 0xDA7A);
    CaptionedExample ex;
    ex.seed = seed;
    ex.scene = sample_scene(rng);
    ex.image = render(ex.scene);
    ex.mask = box_mask(ex.scene);
    const std::string color = name(ex.scene.color), kind = name(ex.scene.kind);
    ex.prompt_mask = "a " + color + " " + kind;
    ex.prompt_full = ex.prompt_mask + " on " + name(ex.scene.background) + " background";
    return ex;
}

/// Examples with seeds seed, seed+1, ..., seed+n-1. Disjoint seed ranges give
/// disjoint splits.
inline std::vector<CaptionedExample> generate(std::uint64_t seed, std::size_t n) {
    if (n < 1) throw ConfigError("generate: n must be at least 1");
    std::vector<CaptionedExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_example(seed + i));
    return out;
}

inline constexpr std::uint64_t kTrainSeedBase = 0;
inline constexpr std::uint64_t kTestSeedBase = 1ull << 40;

/// Writes NNNNNN.ppm / NNNNNN_mask.pgm pairs and index.json into dir.
inline void export_corpus(const std::vector<CaptionedExample>& examples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06zu", i);
        const std::string img = std::string(stem) + ".ppm", mask = std::string(stem) + "_mask.pgm";
        image::write_ppm((dir / img).string(), ex.image);
        image::write_pgm((dir / mask).string(), ex.mask);
        index.push_back({{"file", img},
                         {"mask", mask},
                         {"prompt_full", ex.prompt_full},
                         {"prompt_mask", ex.prompt_mask},
                         {"seed", ex.seed}});
    }
    image::write_text((dir / "index.json").string(), index.dump(2) + "\n");
}

}  // namespace decoy
