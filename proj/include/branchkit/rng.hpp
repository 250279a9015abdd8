#pragma once

// Counter-based randomness: every random stream is a pure function of a
// 64-bit key, and keys are derived from (master seed, path) by hashing.
// This is what makes trees independent of the number of worker threads.

#include <array>
#include <cstdint>
#include <limits>

namespace branchkit {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derive a child key from a parent key and a salt (child index, replicate, ...).
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t salt) noexcept {
    return splitmix64(key ^ splitmix64(salt ^ 0xD1B54A32D192ED03ULL));
}

/// Uniform double in [0,1) from a 64-bit word.
constexpr double to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// xoshiro256** seeded from a key; satisfies UniformRandomBitGenerator.
class KeyedRng {
public:
    using result_type = std::uint64_t;

    explicit KeyedRng(std::uint64_t key) noexcept {
        std::uint64_t s = key;
        for (auto& word : state_) {
            s = splitmix64(s);
            word = s;
        }
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() noexcept { return to_unit((*this)()); }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
};

}  // namespace branchkit
