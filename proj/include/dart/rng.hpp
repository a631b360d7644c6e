// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace dart {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Stateless generator: draw i of stream (seed, key) is a pure function of its
/// three inputs, so any tensor can be regenerated without replaying the others.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view key)
        : base_(splitmix64(seed ^ splitmix64(fnv1a(key)))) {}
    CounterRng(std::uint64_t seed, std::uint64_t key) : base_(splitmix64(seed ^ splitmix64(key))) {}

    std::uint64_t bits(std::uint64_t i) const { return splitmix64(base_ + splitmix64(i)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t i) const {
        return static_cast<double>(bits(i) >> 11) * 0x1p-53;
    }

    /// Uniform in [-1, 1).
    double symmetric(std::uint64_t i) const { return 2.0 * uniform(i) - 1.0; }

private:
    std::uint64_t base_;
};

}  // namespace dart
