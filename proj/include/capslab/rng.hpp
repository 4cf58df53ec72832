#pragma once

#include <cstdint>
#include <random>

#include "capslab/tensor.hpp"

namespace capslab {

using Rng = std::mt19937_64;

/// Stable 64-bit mix for deriving independent stream seeds from (base, tag, ...).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined word
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag0, std::uint64_t tag1 = 0,
                                 std::uint64_t tag2 = 0) {
    return mix_seed(mix_seed(mix_seed(base, tag0), tag1), tag2);
}

template <typename S>
void fill_uniform(BasicTensor<S>& t, Rng& rng, S lo, S hi) {
    std::uniform_real_distribution<S> dist(lo, hi);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
}

template <typename S>
BasicTensor<S> random_uniform(Rng& rng, Shape shape, S lo, S hi) {
    BasicTensor<S> t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

}  // namespace capslab
