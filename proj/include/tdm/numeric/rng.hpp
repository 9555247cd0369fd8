#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>

namespace tdm {

/// Seeded pseudo-random source. Identical seeds yield identical draw sequences.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }
    bool bernoulli(double p) { return uniform(0.0, 1.0) < p; }

    /// Uniform integer in [0, n).
    std::int64_t index(std::int64_t n) {
        return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
    }

    template <typename T>
    void shuffle(std::span<T> items) {
        // Fisher-Yates with our own index draw; std::shuffle is not portable across libraries.
        for (std::int64_t i = static_cast<std::int64_t>(items.size()) - 1; i > 0; --i) {
            std::swap(items[static_cast<std::size_t>(i)], items[static_cast<std::size_t>(index(i + 1))]);
        }
    }

    std::uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace tdm
