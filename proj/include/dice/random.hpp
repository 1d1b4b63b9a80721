#pragma once

#include "dice/tensor.hpp"

#include <cstdint>
#include <random>

namespace dice {

/// Purposes for which independent generator streams are derived from one
/// run seed. Keeping them apart lets variants that consume different
/// amounts of randomness (e.g. with and without a redundancy term) share
/// identical member trajectories.
enum class Stream : std::uint64_t {
    MemberInit = 1,
    DiscriminatorInit = 2,
    Shuffle = 3,
    MemberNoise = 4,
    RedundancyNoise = 5,
    BankSampling = 6,
    Data = 7,
    Evaluation = 8,
};

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    /// Generator for one purpose, derived deterministically from `seed`.
    static Rng stream(std::uint64_t seed, Stream purpose);

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    Tensor normal_tensor(std::size_t rows, std::size_t cols);
    Tensor uniform_tensor(std::size_t rows, std::size_t cols, double lo, double hi);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace dice
