#include "dice/random.hpp"

#include <stdexcept>

namespace dice {

Rng Rng::stream(std::uint64_t seed, Stream purpose) {
    auto tag = static_cast<std::uint64_t>(purpose);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), 0x9e3779b9u};
    std::uint64_t derived = 0;
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    derived = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    return Rng(derived);
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0)
        throw std::invalid_argument("Rng::index on empty range");
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(engine_);
}

Tensor Rng::normal_tensor(std::size_t rows, std::size_t cols) {
    Tensor t(rows, cols);
    for (double& v : t.values())
        v = normal();
    return t;
}

Tensor Rng::uniform_tensor(std::size_t rows, std::size_t cols, double lo, double hi) {
    Tensor t(rows, cols);
    for (double& v : t.values())
        v = lo + (hi - lo) * uniform();
    return t;
}

} // namespace dice
