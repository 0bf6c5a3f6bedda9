#pragma once

#include <cmath>
#include <cstdint>

namespace vla {

// Deterministic 64-bit generator, reproducible across platforms and languages.
//
// Algorithm (splitmix64):
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
//
// Derived values:
//   uniform()    = (next() >> 11) * 2^-53                  in [0, 1)
//   uniform_open = ((next() >> 11) + 1) * 2^-53            in (0, 1]
//   normal()     = Box-Muller on (uniform_open, uniform), spare cached
//   range(n)     = next() % n
//   Sub-stream derivation: stream(seed, tag) seeds a fresh generator with
//   mix(seed ^ mix(tag)) where mix is the splitmix64 finalizer.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Independent deterministic sub-stream of `seed` identified by `tag`.
    static Rng stream(std::uint64_t seed, std::uint64_t tag) {
        return Rng(mix(seed ^ mix(tag)));
    }

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ull;
        return mix(state_);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t range(std::uint64_t n) { return next() % n; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) {
        state_ = s;
        has_spare_ = false;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace vla
