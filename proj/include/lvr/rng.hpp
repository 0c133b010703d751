#pragma once

// Seed derivation and sampling primitives with fully pinned-down arithmetic.
// std::mt19937_64 output is standardized; the transformations below avoid
// std distribution objects, whose results vary across standard libraries.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace lvr {

// splitmix64 finalizer; used to mix seed components.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = mix64(master);
    s = mix64(s ^ a);
    s = mix64(s ^ b);
    return mix64(s ^ c);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Uniform double in [0, 1) built from the top 53 bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n) by rejection, bias-free.
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    // Draws without replacement from [0, n).
    std::vector<int> sample_distinct(int n, int k) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        shuffle(pool);
        pool.resize(k);
        return pool;
    }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

// CDF-walk categorical draw over an explicit probability vector.
inline int categorical(const std::vector<double>& probs, Rng& rng) {
    if (probs.empty()) throw std::invalid_argument("categorical: empty distribution");
    const double u = rng.uniform01();
    double cdf = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        cdf += probs[i];
        if (u < cdf) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

}  // namespace lvr
