#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace numprobe {

// Counter-based splittable generator. The n-th draw of a stream is a pure
// function of (key, n), so streams can be derived for parallel workers
// without sharing state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

    // Independent child stream; split(i) is stable regardless of how many
    // draws the parent has made.
    Rng split(std::uint64_t stream) const noexcept {
        Rng child{0};
        child.key_ = mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL));
        return child;
    }

    std::uint64_t next_u64() noexcept { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); n > 0. Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t n) noexcept {
        while (true) {
            const std::uint64_t x = next_u64();
            const __uint128_t m = static_cast<__uint128_t>(x) * n;
            const auto low = static_cast<std::uint64_t>(m);
            if (low >= n || low >= (0 - n) % n) {
                return static_cast<std::uint64_t>(m >> 64);
            }
        }
    }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t integer(std::int64_t lo, std::int64_t hi) noexcept {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    // Box-Muller; no cached spare so the stream stays a pure function of the counter.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace numprobe
