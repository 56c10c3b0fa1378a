#pragma once

// TNSR container: "TNSR", u8 version (1), u32 rank, u32 dims[rank], then the
// float32 payload. All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "decoy/tensor.hpp"

namespace decoy::tnsr {

inline constexpr std::array<char, 4> kMagic{'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("tnsr: truncated header");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void write(std::ostream& os, const Tensor<float>& t) {
    os.write(kMagic.data(), 4);
    os.put(static_cast<char>(kVersion));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
    if (!os) throw Error("tnsr: write failed");
}

inline Tensor<float> read(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kMagic) throw Error("tnsr: bad magic");
    int version = is.get();
    if (version != kVersion) throw Error("tnsr: unsupported version " + std::to_string(version));
    const std::uint32_t rank = detail::get_u32(is);
    if (rank == 0 || rank > 8) throw Error("tnsr: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(is);
    std::vector<float> data(numel_of(shape));
    for (auto& v : data) v = std::bit_cast<float>(detail::get_u32(is));
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void save(const std::string& path, const Tensor<float>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("tnsr: cannot open " + path + " for writing");
    write(os, t);
}

inline Tensor<float> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("tnsr: cannot open " + path);
    return read(is);
}

}  // namespace decoy::tnsr
