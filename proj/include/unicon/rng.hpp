#pragma once

#include <cstdint>
#include <random>

#include "unicon/tensor.hpp"

namespace unicon {

// splitmix64 finalizer; used to derive independent streams from
// (master seed, stream index) pairs.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : engine_(mix_seed(seed, stream)) {}

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(engine_); }
    std::uint64_t next() { return engine_(); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
    bool bernoulli(double p) { return uniform() < p; }

    Tensor normal_tensor(const Shape& shape, double stddev) {
        Tensor t(shape);
        for (auto& v : t.data()) v = normal(0.0, stddev);
        return t;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace unicon
