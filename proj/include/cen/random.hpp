#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace cen {

/// Seeded 64-bit Mersenne Twister with portable real/integer draws.
///
/// std::uniform_*_distribution output is implementation-defined, so the
/// conversions here are written out to keep streams identical across
/// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Independent stream keyed by several integers (e.g. seed, iteration).
    Rng(std::initializer_list<std::uint64_t> key) {
        std::vector<std::uint32_t> words;
        for (auto k : key) {
            words.push_back(static_cast<std::uint32_t>(k));
            words.push_back(static_cast<std::uint32_t>(k >> 32));
        }
        std::seed_seq seq(words.begin(), words.end());
        engine_.seed(seq);
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n > 0.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    bool coin() { return (engine_() >> 63) != 0; }

private:
    std::mt19937_64 engine_;
};

}  // namespace cen
