#pragma once

#include <cmath>
#include <cstdint>

#include "soupforge/common.hpp"

namespace soupforge {

// Small explicit generator (splitmix64) so that every recorded value is
// reproducible from a 64-bit key alone, independent of the standard library.
// Streams are derived by hashing, never by sharing state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw NumericError("uniform_int: empty range");
        std::uint64_t span = std::uint64_t(hi) - std::uint64_t(lo) + 1;
        return lo + int(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derive the seed of an independent child stream.
inline std::uint64_t fork_seed(std::uint64_t parent, std::uint64_t tag) {
    return hash_combine(parent, tag);
}

}  // namespace soupforge
