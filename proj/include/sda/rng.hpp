#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace sda {

// Named, order-independent seed derivation: every consumer of randomness
// asks for a substream by (purpose, indices) instead of sharing one engine,
// so adding or removing a consumer never shifts anyone else's draws.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t master, const std::string& tag) {
    return splitmix64(master ^ splitmix64(fnv1a64(tag)));
}

inline uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t a) {
    return splitmix64(derive_seed(master, tag) ^ splitmix64(a + 0x51ed2701ULL));
}

inline uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t a, uint64_t b) {
    return splitmix64(derive_seed(master, tag, a) ^ splitmix64(b + 0x2c1b3c6dULL));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace sda
