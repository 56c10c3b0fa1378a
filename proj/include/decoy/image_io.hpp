#pragma once

// ASCII PPM (P3) images and PGM (P2) masks, 8-bit. Pixel values map to
// [0,1] floats; writing rounds to the nearest level.

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "decoy/tensor.hpp"

namespace decoy::image {

namespace detail {

inline std::string next_token(std::istream& is) {
    std::string tok;
    while (is >> tok) {
        if (tok[0] == '#') {
            std::string rest;
            std::getline(is, rest);
            continue;
        }
        return tok;
    }
    throw Error("image: unexpected end of file");
}

inline int next_int(std::istream& is) {
    std::string tok = next_token(is);
    try {
        return std::stoi(tok);
    } catch (const std::exception&) {
        throw Error("image: expected integer, got '" + tok + "'");
    }
}

inline int to_level(float v) { return static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

inline Tensor<float> read_netpbm(std::istream& is, const std::string& magic, std::size_t channels) {
    if (next_token(is) != magic) throw Error("image: expected " + magic + " header");
    const int w = next_int(is), h = next_int(is), maxv = next_int(is);
    if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 65535) throw Error("image: bad header");
    std::vector<float> data(static_cast<std::size_t>(w) * h * channels);
    for (auto& v : data) {
        int x = next_int(is);
        if (x < 0 || x > maxv) throw Error("image: sample out of range");
        v = static_cast<float>(x) / static_cast<float>(maxv);
    }
    Shape shape{static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
    if (channels > 1) shape.push_back(channels);
    return Tensor<float>(shape, std::move(data));
}

}  // namespace detail

inline std::string to_ppm(const Tensor<float>& img) {
    if (img.rank() != 3 || img.dim(2) != 3) throw ShapeError("ppm needs [H,W,3], got " + to_string(img.shape()));
    std::ostringstream os;
    os << "P3\n" << img.dim(1) << ' ' << img.dim(0) << "\n255\n";
    for (std::size_t y = 0; y < img.dim(0); ++y) {
        for (std::size_t x = 0; x < img.dim(1); ++x)
            for (std::size_t c = 0; c < 3; ++c)
                os << (x || c ? " " : "") << detail::to_level(img[(y * img.dim(1) + x) * 3 + c]);
        os << '\n';
    }
    return os.str();
}

inline std::string to_pgm(const Tensor<float>& img) {
    if (img.rank() != 2) throw ShapeError("pgm needs [H,W], got " + to_string(img.shape()));
    std::ostringstream os;
    os << "P2\n" << img.dim(1) << ' ' << img.dim(0) << "\n255\n";
    for (std::size_t y = 0; y < img.dim(0); ++y) {
        for (std::size_t x = 0; x < img.dim(1); ++x)
            os << (x ? " " : "") << detail::to_level(img[y * img.dim(1) + x]);
        os << '\n';
    }
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os << text;
    if (!os) throw Error("write failed: " + path);
}

inline void write_ppm(const std::string& path, const Tensor<float>& img) { write_text(path, to_ppm(img)); }
inline void write_pgm(const std::string& path, const Tensor<float>& img) { write_text(path, to_pgm(img)); }

inline Tensor<float> read_ppm(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path);
    return detail::read_netpbm(is, "P3", 3);
}

/// Reads a mask and binarizes it (>= half intensity is 1 = keep).
inline Tensor<float> read_pgm_mask(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path);
    Tensor<float> raw = detail::read_netpbm(is, "P2", 1);
    std::vector<float> v(raw.data().begin(), raw.data().end());
    for (auto& x : v) x = x >= 0.5f ? 1.0f : 0.0f;
    return Tensor<float>(raw.shape(), std::move(v));
}

/// Snap to the 8-bit grid the PPM format stores.
inline Tensor<float> quantize8(const Tensor<float>& img) {
    std::vector<float> v(img.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(detail::to_level(img[i])) / 255.0f;
    return Tensor<float>(img.shape(), std::move(v));
}

}  // namespace decoy::image
