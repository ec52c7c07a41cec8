#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace insighttab {

// Deterministic randomness that does not depend on the standard library's
// distribution implementations, so seeded plans are identical across
// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Mixes several integers into one stream seed (splitmix64 finalizer).
    static std::uint64_t derive(std::initializer_list<std::uint64_t> parts) {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (auto p : parts) {
            h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            h = mix(h);
        }
        return h;
    }

    std::uint64_t next() { return engine_(); }

    // Uniform integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound) {
        if (bound <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i = 0; i < k && i < n; ++i) {
            const auto j = i + static_cast<std::size_t>(below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k < n ? k : n);
        return pool;
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), std::size_t{0});
        shuffle(std::span<std::size_t>(p));
        return p;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace insighttab
