#pragma once

// Seeded random stream built on the splitmix64 finalizer. The generator is a
// counter walking a Weyl sequence, so the k-th draw is a pure function of
// (seed, k): identical seeds reproduce identical sequences on every platform,
// unlike the <random> distributions whose output is implementation-defined.
//
// Child streams are derived from the parent's base seed and a text label,
// never from its current position, so adding draws to one stream cannot
// shift another.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dcbm/errors.hpp"
#include "dcbm/matrix.hpp"

namespace dcbm {

/// splitmix64 output finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Deterministic (seed, label) -> seed derivation for child streams and
/// per-task seeds. Independent of any stream position.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
    std::uint64_t h = fnv1a64(label);
    return mix64(mix64(master + 0x9E3779B97F4A7C15ULL) ^ h);
}

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed)
        : seed_(seed), state_(seed), has_spare_(false), spare_(0.0) {}

    std::uint64_t seed() const { return seed_; }

    RngStream child(std::string_view label) const {
        return RngStream(derive_seed(seed_, label));
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via the Marsaglia polar method; the second variate of
    /// each accepted pair is cached. No trig calls, exact Gaussian law.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    double normal(double sigma) { return sigma * normal(); }

    /// Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ConfigError("RngStream::below: n must be positive");
        std::uint64_t threshold = (~n + 1) % n; // 2^64 mod n
        for (;;) {
            std::uint64_t x = next_u64();
            if (x >= threshold) return x % n;
        }
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_;
    double spare_;
};

/// Matrix with i.i.d. N(0, sigma^2) entries.
inline Matrix random_gaussian(RngStream& rng, std::size_t rows, std::size_t cols,
                              double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("random_gaussian: sigma must be positive");
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.normal(sigma);
    return m;
}

} // namespace dcbm
