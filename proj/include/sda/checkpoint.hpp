#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "tensor.hpp"

namespace sda {

using TensorMap = std::map<std::string, Tensor>;

namespace detail {

inline void write_u32le(std::ostream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                          static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f64le(std::ostream& os, double d) {
    const uint64_t x = std::bit_cast<uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(x);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'A', 'C', 'K', 'P', 'T', '1'};

inline std::string manifest_path(const std::string& checkpoint_path) { return checkpoint_path + ".manifest"; }

// Binary layout: magic, u32 record count, then per tensor
// (u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64).
// All integers and doubles little-endian; doubles round-trip bit-exactly.
// A text manifest listing "name rows cols" per line is written alongside.
inline void save_checkpoint(const std::string& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write(kCheckpointMagic, 8);
    detail::write_u32le(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::write_u32le(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32le(os, static_cast<uint32_t>(t.rows));
        detail::write_u32le(os, static_cast<uint32_t>(t.cols));
        for (double d : t.v) detail::write_f64le(os, d);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);

    std::ofstream ms(manifest_path(path), std::ios::trunc);
    if (!ms) throw std::runtime_error("checkpoint: cannot open manifest for writing");
    for (const auto& [name, t] : tensors) ms << name << ' ' << t.rows << ' ' << t.cols << '\n';
}

inline TensorMap load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t count = detail::read_u32le(is);
    TensorMap out;
    for (uint32_t r = 0; r < count; ++r) {
        const uint32_t name_len = detail::read_u32le(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("checkpoint: truncated name");
        const uint32_t rows = detail::read_u32le(is);
        const uint32_t cols = detail::read_u32le(is);
        Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        for (int i = 0; i < t.size(); ++i) t.v[i] = detail::read_f64le(is);
        if (!out.emplace(std::move(name), std::move(t)).second)
            throw std::runtime_error("checkpoint: duplicate tensor name in " + path);
    }
    return out;
}

}  // namespace sda
