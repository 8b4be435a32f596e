#pragma once

#include "dde/tensor.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace dde {

/// splitmix64 finalizer; used to derive independent stream seeds from (seed, index) pairs.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

/// Seeded random source. Every draw is reproducible bitwise for a fixed seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }

    /// Uniform integer in [lo, hi].
    long integer(long lo, long hi) {
        std::uniform_int_distribution<long> d(lo, hi);
        return d(engine_);
    }

    std::uint64_t next_seed() { return engine_(); }

    template <class T>
    Mat<T> normal_matrix(long rows, long cols, double std = 1.0) {
        Mat<T> m(rows, cols);
        for (long i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * normal());
        return m;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Per-row seeds derived from one run seed; equal run seeds give every method the same
/// initial noise.
inline std::vector<std::uint64_t> row_seeds(std::uint64_t seed, long n) {
    std::vector<std::uint64_t> s(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) s[i] = derive_seed(seed, static_cast<std::uint64_t>(i));
    return s;
}

}  // namespace dde
