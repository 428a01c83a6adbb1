#ifndef ODSMI_RNG_HPP
#define ODSMI_RNG_HPP

#include <cstdint>
#include <random>
#include <string_view>

namespace odsmi {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Node of a deterministic seed tree. Children are addressed by integer or
// string keys, so a stream depends only on its path from the root and never
// on how many draws sibling streams consumed.
class SeedTree {
public:
    explicit SeedTree(std::uint64_t seed) : state_(splitmix64(seed)) {}

    SeedTree child(std::uint64_t key) const { return SeedTree(Raw{splitmix64(state_ ^ splitmix64(key + 0x632BE59BD9B4E019ULL))}); }
    SeedTree child(std::string_view key) const { return child(fnv1a64(key)); }

    Rng rng() const {
        std::seed_seq seq{static_cast<std::uint32_t>(state_), static_cast<std::uint32_t>(state_ >> 32)};
        return Rng(seq);
    }

    std::uint64_t value() const { return state_; }

private:
    struct Raw {
        std::uint64_t v;
    };
    explicit SeedTree(Raw r) : state_(r.v) {}

    std::uint64_t state_;
};

} // namespace odsmi

#endif
