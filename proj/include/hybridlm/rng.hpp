#pragma once

#include <cstdint>
#include <cmath>

namespace hlm {

// Counter-based splitmix64 generator. Portable: identical streams on every
// platform for a given (seed, counter) start, which keeps golden values stable.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Box-Muller; one draw per call, second value discarded for simplicity.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        return next_u64() % n;
    }

    // derive an independent stream, e.g. per grid cell or per layer
    Rng fork(uint64_t salt) const {
        Rng r(state_ ^ (0xA5A5A5A55A5A5A5Aull + salt * 0xD1B54A32D192ED03ull));
        r.next_u64();
        return r;
    }

private:
    uint64_t state_;
};

} // namespace hlm
