#pragma once

// Counter-based random streams.
//
// Every random draw in the project is a pure function of
// (global seed, stream, key, counter). A stream never carries hidden state
// beyond its counter, so results do not depend on the order in which
// samples are processed or on the number of worker threads.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace filmseg {

// Logical stream identifiers; values are part of the reproducibility
// contract and must never be renumbered.
enum class Stream : std::uint64_t {
    Phantom = 1,
    Augment = 2,
    RaterPerturb = 3,
    Split = 4,
    Init = 5,
    EpochShuffle = 6,
    RaterDraw = 7,
    Test = 99,
};

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a, used to turn sample ids into stream keys.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

class CounterRng {
public:
    CounterRng(std::uint64_t seed, Stream stream, std::uint64_t key = 0) noexcept
        : key_(mix64(mix64(seed ^ mix64(static_cast<std::uint64_t>(stream))) ^ mix64(key + 0x632be59bd9b4e019ULL))) {}

    CounterRng(std::uint64_t seed, Stream stream, std::string_view id) noexcept
        : CounterRng(seed, stream, hash_string(id)) {}

    std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; consumes exactly two draws.
    double normal() noexcept {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t counter() const noexcept { return counter_; }

    // Derives an independent child stream; used for per-item sub-streams.
    CounterRng fork(std::uint64_t child) const noexcept {
        CounterRng r = *this;
        r.key_ = mix64(key_ ^ mix64(child ^ 0xd1b54a32d192ed03ULL));
        r.counter_ = 0;
        return r;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

template <typename T>
void shuffle(std::vector<T>& items, CounterRng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

} // namespace filmseg
