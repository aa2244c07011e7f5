#pragma once

#include <cmath>
#include <cstdint>

namespace grow {

// Counter-based deterministic generator: draw i of stream s under seed k is
// mix(k, s, i), so a sequence depends only on (seed, stream, call index) and
// is bit-for-bit reproducible across runs and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    static uint64_t mix(uint64_t a, uint64_t b, uint64_t c) {
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1) + 0x6a09e667f3bcc909ull * (c + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() { return mix(seed_, stream_, counter_++); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    uint64_t uniform_int(uint64_t n) {
        return uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal, Box-Muller; each pair of draws consumes two uniforms.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = (double(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = double(next_u64() >> 11) * 0x1.0p-53;          // [0, 1)
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Independent substream; deterministic function of (seed, stream, tag).
    Rng fork(uint64_t tag) const { return Rng(mix(seed_, stream_, 0x517cc1b727220a95ull ^ tag), tag); }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace grow
