#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tgdpo {

// All randomness flows from one base seed through named sub-streams so each
// component (data, init, shuffle, verify, ...) can be reproduced on its own.
// std::mt19937_64 output is pinned by the standard; the helpers below replace
// std::uniform_*_distribution, whose mappings are implementation-defined and
// would break the byte-identical reproducibility contract across toolchains.

std::uint64_t splitmix64(std::uint64_t& state);

// Derives the seed of a named sub-stream from a base seed.
std::uint64_t substream_seed(std::uint64_t base, std::string_view name);

// Derives the seed of an indexed item (pair i, run j, ...) within a stream.
std::uint64_t item_seed(std::uint64_t stream, std::uint64_t index);

// Uniform integer in [0, n), n >= 1. Unbiased via rejection.
std::uint64_t rand_below(std::mt19937_64& rng, std::uint64_t n);

// Uniform double in [0, 1) with 53 random bits.
double rand_unit(std::mt19937_64& rng);

// Uniform double in [lo, hi).
double rand_range(std::mt19937_64& rng, double lo, double hi);

// Fisher-Yates with explicit draws; same result on every platform.
template <typename T>
void shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[rand_below(rng, i)]);
  }
}

}  // namespace tgdpo
