#pragma once

#include <cstdint>
#include <limits>
#include <string_view>
#include <utility>
#include <vector>

#include "hallu/digest.hpp"

namespace hallu {

/// Counter-based generator: output i is splitmix64(key + i * golden). Streams keyed by
/// (seed, name) are independent of scheduling order, and the type satisfies
/// UniformRandomBitGenerator so it plugs into <random> and std::shuffle.
class KeyedRng {
public:
    using result_type = std::uint64_t;

    explicit KeyedRng(std::uint64_t key) : key_(mix(key)) {}
    KeyedRng(std::uint64_t seed, std::string_view name) : key_(mix(seed ^ mix(fnv1a64(name)))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return mix(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL); }

    /// Uniform integer in [0, n) by rejection, so the result is unbiased and identical
    /// across standard libraries.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t x;
        do {
            x = (*this)();
        } while (x >= limit);
        return x % n;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(below(i));
            using std::swap;
            swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace hallu
