#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace entran {

// Counter-style splitmix64 generator. One 64-bit word of state, so streams
// are trivial to checkpoint and restore bit-exactly.
struct Rng {
    std::uint64_t state = 0x9e3779b97f4a7c15ULL;

    static Rng from(std::uint64_t seed, std::uint64_t stream = 0) {
        Rng r;
        r.state = seed * 0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL;
        r.next();
        return r;
    }

    std::uint64_t next() {
        state += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; draws two uniforms per call and keeps
    // no spare, so the state sequence stays a pure function of call count
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // uniform integer in [0, n)
    std::uint32_t below(std::uint32_t n) { return n == 0 ? 0 : std::uint32_t(next() % n); }
};

// Fisher-Yates with an explicit generator; std::shuffle is
// implementation-defined and would break cross-toolchain reproducibility.
template <typename T>
inline void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.below(std::uint32_t(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace entran
