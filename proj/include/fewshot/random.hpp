#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace fewshot {

// Uniform integer in [0, n) by rejection, independent of the standard library's distributions.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n);

// Uniform real in [0, 1) from the top 53 bits of one draw.
double uniform_unit(std::mt19937_64& rng);

// Standard normal via the Box-Muller transform (one draw pair per value).
double standard_normal(std::mt19937_64& rng);

// Generator for unit `index` of a stream rooted at `seed`.
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t index);

// Seed for child `index` of `seed`, for nested derivations.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Moves a uniformly drawn k-subset (ordered as drawn) to the front of `items`.
template <typename T>
void partial_shuffle(std::vector<T>& items, std::size_t k, std::mt19937_64& rng)
{
    for (std::size_t i = 0; i < k && i + 1 < items.size(); ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_below(rng, items.size() - i));
        std::swap(items[i], items[j]);
    }
}

} // namespace fewshot
